use nalgebra::DMatrix;

use super::matrix::{matmul_at_into, matmul_bt_into, matmul_into, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]: the node id plus its shape.
///
/// Tensors are cheap `Copy` handles; the values live on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    #[inline]
    pub fn id(&self) -> usize {
        self.id
    }
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Negate,
    Scale(f64),
    Offset(f64),
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    /// Clamp into `[lo, hi]`; zero gradient on clamped entries.
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Reduction axis. `Rows` collapses the row dimension (m×n → 1×n),
/// `Cols` collapses the column dimension (m×n → m×1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Rows,
    Cols,
}

/// One anchor row of a contrastive loss: the row of the logit matrix, the
/// columns that are positives for it and the columns that are negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveAnchor {
    pub row: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Injected backward faults, used to prove the gradient checker catches them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    MatmulBackward,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Unary(usize, UnaryOp),
    Binary(usize, usize, BinaryOp),
    SoftmaxRows(usize),
    Reduce(usize, ReduceKind, Axis),
    Huber(usize, f64),
    GatherRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    RepeatRows(usize),
    RepeatCols(usize),
    Reshape(usize),
    Solve(usize, usize),
    So3Exp(usize),
    InfoNce(usize, Vec<ContrastiveAnchor>, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is built for one loss evaluation and consumed by a single call to
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<Fault>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&Matrix> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `t`, zeros when `t` does not influence the loss.
    pub fn wrt(&self, t: Tensor) -> Matrix {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(t.rows, t.cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.id].value
    }

    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.id].value.item()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Tensor {
        let t = Tensor {
            id: self.nodes.len(),
            rows: value.rows(),
            cols: value.cols(),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        t
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(Op::Leaf, value, false)
    }

    /// Copy of `t`'s value that is cut from the gradient flow.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let v = self.value(t).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.cols != b.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let mut out = Matrix::zeros(a.rows, b.cols);
        matmul_into(self.value(a), self.value(b), &mut out);
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(Op::MatMul(a.id, b.id), out, rg))
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a.id]);
        self.push(Op::Transpose(a.id), v, rg)
    }

    pub fn unary(&mut self, a: Tensor, op: UnaryOp) -> Result<Tensor> {
        let x = self.value(a);
        let v = match op {
            UnaryOp::Negate => x.map(|v| -v),
            UnaryOp::Scale(s) => x.map(|v| v * s),
            UnaryOp::Offset(s) => x.map(|v| v + s),
            UnaryOp::Exp => x.map(f64::exp),
            UnaryOp::Log | UnaryOp::Sqrt => {
                let strict = matches!(op, UnaryOp::Log);
                if let Some((index, &value)) = x
                    .data()
                    .iter()
                    .enumerate()
                    .find(|(_, &v)| if strict { v <= 0.0 } else { v < 0.0 } || v.is_nan())
                {
                    return Err(Error::Domain {
                        op: if strict { "log" } else { "sqrt" },
                        index,
                        value,
                    });
                }
                if strict {
                    x.map(f64::ln)
                } else {
                    x.map(f64::sqrt)
                }
            }
            UnaryOp::Tanh => x.map(f64::tanh),
            UnaryOp::Sigmoid => x.map(sigmoid),
            UnaryOp::Clamp(lo, hi) => {
                if lo > hi {
                    return Err(Error::Parameter(format!("clamp bounds {lo} > {hi}")));
                }
                x.map(|v| v.clamp(lo, hi))
            }
        };
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::Unary(a.id, op), v, rg))
    }

    pub fn binary(&mut self, a: Tensor, b: Tensor, op: BinaryOp) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "{op:?} on {}x{} and {}x{} (no implicit broadcasting)",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let (x, y) = (self.value(a), self.value(b));
        let v = match op {
            BinaryOp::Add => x.zip_map(y, |p, q| p + q),
            BinaryOp::Sub => x.zip_map(y, |p, q| p - q),
            BinaryOp::Mul => x.zip_map(y, |p, q| p * q),
            BinaryOp::Div => x.zip_map(y, |p, q| p / q),
        };
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(Op::Binary(a.id, b.id, op), v, rg))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.unary(a, UnaryOp::Negate).expect("negate is total")
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Tensor {
        self.unary(a, UnaryOp::Scale(s)).expect("scale is total")
    }

    pub fn offset(&mut self, a: Tensor, s: f64) -> Tensor {
        self.unary(a, UnaryOp::Offset(s)).expect("offset is total")
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary(a, UnaryOp::Exp).expect("exp is total")
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(a, UnaryOp::Log)
    }

    pub fn sqrt(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(a, UnaryOp::Sqrt)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.unary(a, UnaryOp::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(a, UnaryOp::Sigmoid).expect("sigmoid is total")
    }

    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        self.unary(a, UnaryOp::Clamp(lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        if a.cols == 0 {
            return Err(Error::Dimension("softmax over zero columns".into()));
        }
        let x = self.value(a);
        let mut out = Matrix::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            let row = x.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out.set(r, c, e);
                z += e;
            }
            for c in 0..a.cols {
                out.set(r, c, out.get(r, c) / z);
            }
        }
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::SoftmaxRows(a.id), out, rg))
    }

    pub fn reduce(&mut self, a: Tensor, kind: ReduceKind, axis: Axis) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::Dimension("reduction of an empty tensor".into()));
        }
        let x = self.value(a);
        let mut out = match axis {
            Axis::All => Matrix::scalar(x.sum()),
            Axis::Rows => {
                let mut o = Matrix::zeros(1, a.cols);
                for r in 0..a.rows {
                    for (c, v) in x.row(r).iter().enumerate() {
                        o.data_mut()[c] += v;
                    }
                }
                o
            }
            Axis::Cols => {
                let mut o = Matrix::zeros(a.rows, 1);
                for r in 0..a.rows {
                    o.data_mut()[r] = x.row(r).iter().sum();
                }
                o
            }
        };
        if kind == ReduceKind::Mean {
            let n = reduce_count(a, axis) as f64;
            out = out.scale(1.0 / n);
        }
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::Reduce(a.id, kind, axis), out, rg))
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.reduce(a, ReduceKind::Sum, Axis::All)
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        self.reduce(a, ReduceKind::Mean, Axis::All)
    }

    /// Sum of elementwise Huber penalties, as a 1x1 tensor.
    pub fn huber(&mut self, a: Tensor, delta: f64) -> Result<Tensor> {
        if !(delta > 0.0) {
            return Err(Error::Parameter(format!("huber delta must be > 0, got {delta}")));
        }
        let total = self
            .value(a)
            .data()
            .iter()
            .map(|&x| huber_value(x, delta))
            .sum();
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::Huber(a.id, delta), Matrix::scalar(total), rg))
    }

    pub fn gather_rows(&mut self, a: Tensor, idx: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range for {} rows",
                a.rows
            )));
        }
        let v = self.value(a).select_rows(idx);
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::GatherRows(a.id, idx.to_vec()), v, rg))
    }

    pub fn gather_cols(&mut self, a: Tensor, idx: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.cols) {
            return Err(Error::Dimension(format!(
                "column index {bad} out of range for {} columns",
                a.cols
            )));
        }
        let x = self.value(a);
        let mut v = Matrix::zeros(a.rows, idx.len());
        for r in 0..a.rows {
            for (k, &c) in idx.iter().enumerate() {
                v.set(r, k, x.get(r, c));
            }
        }
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::GatherCols(a.id, idx.to_vec()), v, rg))
    }

    pub fn slice_cols(&mut self, a: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_cols(a, &idx)
    }

    pub fn slice_rows(&mut self, a: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        if let Some(p) = parts.iter().find(|p| p.cols != first.cols) {
            return Err(Error::Dimension(format!(
                "concat_rows: {} columns vs {}",
                p.cols, first.cols
            )));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * first.cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        let v = Matrix::from_vec(rows, first.cols, data)?;
        Ok(self.push(Op::ConcatRows(ids), v, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        if let Some(p) = parts.iter().find(|p| p.rows != first.rows) {
            return Err(Error::Dimension(format!(
                "concat_cols: {} rows vs {}",
                p.rows, first.rows
            )));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut v = Matrix::zeros(first.rows, cols);
        let mut off = 0;
        for p in parts {
            let x = self.value(*p);
            for r in 0..p.rows {
                for c in 0..p.cols {
                    v.set(r, off + c, x.get(r, c));
                }
            }
            off += p.cols;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Op::ConcatCols(ids), v, rg))
    }

    /// Stacks a 1×n row `m` times.
    pub fn repeat_rows(&mut self, a: Tensor, m: usize) -> Result<Tensor> {
        if a.rows != 1 {
            return Err(Error::Dimension(format!(
                "repeat_rows expects a single row, got {}x{}",
                a.rows, a.cols
            )));
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(m * a.cols);
        for _ in 0..m {
            data.extend_from_slice(&row);
        }
        let rg = self.rg(&[a.id]);
        let v = Matrix::from_vec(m, a.cols, data)?;
        Ok(self.push(Op::RepeatRows(a.id), v, rg))
    }

    /// Repeats an m×1 column `n` times side by side.
    pub fn repeat_cols(&mut self, a: Tensor, n: usize) -> Result<Tensor> {
        if a.cols != 1 {
            return Err(Error::Dimension(format!(
                "repeat_cols expects a single column, got {}x{}",
                a.rows, a.cols
            )));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(a.rows * n);
        for r in 0..a.rows {
            data.extend(std::iter::repeat_n(x.data()[r], n));
        }
        let rg = self.rg(&[a.id]);
        let v = Matrix::from_vec(a.rows, n, data)?;
        Ok(self.push(Op::RepeatCols(a.id), v, rg))
    }

    pub fn reshape(&mut self, a: Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let v = Matrix::from_vec(rows, cols, self.value(a).data().to_vec())?;
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::Reshape(a.id), v, rg))
    }

    /// Solves `a · x = b` for square `a`.
    pub fn solve(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.rows != a.cols || a.rows != b.rows {
            return Err(Error::Dimension(format!(
                "solve with {}x{} system and {}x{} right-hand side",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let x = dense_solve(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(Op::Solve(a.id, b.id), x, rg))
    }

    /// Rotation matrix `exp([ω]×)` of a 3-element rotation vector.
    pub fn so3_exp(&mut self, w: Tensor) -> Result<Tensor> {
        if w.len() != 3 {
            return Err(Error::Dimension(format!(
                "so3_exp expects 3 entries, got {}x{}",
                w.rows, w.cols
            )));
        }
        let d = self.value(w).data();
        let (r, _) = so3_exp_jacobian([d[0], d[1], d[2]]);
        let v = Matrix::from_rows(&r);
        let rg = self.rg(&[w.id]);
        Ok(self.push(Op::So3Exp(w.id), v, rg))
    }

    /// Mean InfoNCE over every (anchor, positive) term of `anchors`:
    /// `-log(exp(l_p) / (exp(l_p) + Σ_neg exp(l_n)))`.
    pub fn info_nce(&mut self, logits: Tensor, anchors: &[ContrastiveAnchor]) -> Result<Tensor> {
        let x = self.value(logits);
        let mut terms = 0usize;
        let mut total = 0.0;
        for a in anchors {
            if a.row >= logits.rows
                || a.positives.iter().chain(&a.negatives).any(|&c| c >= logits.cols)
            {
                return Err(Error::Dimension(format!(
                    "contrastive anchor row {} indexes outside {}x{} logits",
                    a.row, logits.rows, logits.cols
                )));
            }
            if a.positives.is_empty() || a.negatives.is_empty() {
                continue;
            }
            let row = x.row(a.row);
            let m = anchor_max(row, a);
            let s_neg: f64 = a.negatives.iter().map(|&c| (row[c] - m).exp()).sum();
            for &p in &a.positives {
                let lp = row[p] - m;
                total += -lp + (lp.exp() + s_neg).ln();
                terms += 1;
            }
        }
        if terms == 0 {
            return Err(Error::DegenerateBatch(
                "no anchor has both a positive and a negative".into(),
            ));
        }
        let v = Matrix::scalar(total / terms as f64);
        let rg = self.rg(&[logits.id]);
        Ok(self.push(Op::InfoNce(logits.id, anchors.to_vec(), terms), v, rg))
    }

    /// Reverse sweep from a scalar loss. A tape can be swept once.
    pub fn backward(&mut self, loss: Tensor) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a 1x1 loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if loss.id >= self.nodes.len() {
            return Err(Error::State("loss tensor is not on this tape".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    matmul_bt_into(g, val(*b), &mut ga);
                    if self.fault == Some(Fault::MatmulBackward) {
                        ga = ga.scale(1.5);
                    }
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    matmul_at_into(val(*a), g, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Unary(a, op) => {
                let x = val(*a);
                let y = &node.value;
                let ga = match *op {
                    UnaryOp::Negate => g.map(|v| -v),
                    UnaryOp::Scale(s) => g.scale(s),
                    UnaryOp::Offset(_) => g.clone(),
                    UnaryOp::Exp => g.zip_map(y, |gv, yv| gv * yv),
                    UnaryOp::Log => g.zip_map(x, |gv, xv| gv / xv),
                    UnaryOp::Sqrt => g.zip_map(y, |gv, yv| gv / (2.0 * yv)),
                    UnaryOp::Tanh => g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)),
                    UnaryOp::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)),
                    UnaryOp::Clamp(lo, hi) => {
                        g.zip_map(x, |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 })
                    }
                };
                accumulate(grads, *a, ga);
            }
            Op::Binary(a, b, op) => {
                let (x, y) = (val(*a), val(*b));
                match op {
                    BinaryOp::Add => {
                        add_if(grads, needs(*a), *a, || g.clone());
                        add_if(grads, needs(*b), *b, || g.clone());
                    }
                    BinaryOp::Sub => {
                        add_if(grads, needs(*a), *a, || g.clone());
                        add_if(grads, needs(*b), *b, || g.map(|v| -v));
                    }
                    BinaryOp::Mul => {
                        add_if(grads, needs(*a), *a, || g.zip_map(y, |gv, yv| gv * yv));
                        add_if(grads, needs(*b), *b, || g.zip_map(x, |gv, xv| gv * xv));
                    }
                    BinaryOp::Div => {
                        add_if(grads, needs(*a), *a, || g.zip_map(y, |gv, yv| gv / yv));
                        add_if(grads, needs(*b), *b, || {
                            let q = &node.value;
                            let t = g.zip_map(q, |gv, qv| gv * qv);
                            t.zip_map(y, |tv, yv| -tv / yv)
                        });
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Reduce(a, kind, axis) => {
                let x = val(*a);
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => {
                        1.0 / reduce_count_shape(x.rows(), x.cols(), *axis) as f64
                    }
                };
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        let gv = match axis {
                            Axis::All => g.item(),
                            Axis::Rows => g.data()[c],
                            Axis::Cols => g.data()[r],
                        };
                        ga.set(r, c, gv * scale);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Huber(a, delta) => {
                let gv = g.item();
                let d = *delta;
                accumulate(grads, *a, val(*a).map(|x| gv * x.clamp(-d, d)));
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..x.cols() {
                        let cur = ga.get(r, c);
                        ga.set(r, c, cur + g.get(k, c));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherCols(a, idx) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (k, &c) in idx.iter().enumerate() {
                        let cur = ga.get(r, c);
                        ga.set(r, c, cur + g.get(r, k));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &p in ids {
                    let (rows, cols) = val(p).shape();
                    if needs(p) {
                        let part = g.data()[off * cols..(off + rows) * cols].to_vec();
                        accumulate(grads, p, Matrix::from_vec(rows, cols, part).unwrap());
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(ids) => {
                let mut off = 0;
                for &p in ids {
                    let (rows, cols) = val(p).shape();
                    if needs(p) {
                        let mut part = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                part.set(r, c, g.get(r, off + c));
                            }
                        }
                        accumulate(grads, p, part);
                    }
                    off += cols;
                }
            }
            Op::RepeatRows(a) => {
                let mut ga = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (c, v) in g.row(r).iter().enumerate() {
                        ga.data_mut()[c] += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RepeatCols(a) => {
                let mut ga = Matrix::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    ga.data_mut()[r] = g.row(r).iter().sum();
                }
                accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (rows, cols) = val(*a).shape();
                accumulate(grads, *a, Matrix::from_vec(rows, cols, g.data().to_vec()).unwrap());
            }
            Op::Solve(a, b) => {
                // x = A⁻¹b: gb = A⁻ᵀ g, gA = -gb xᵀ
                let x = &node.value;
                let gb = dense_solve(&val(*a).transpose(), g)
                    .expect("system was solvable in the forward pass");
                if needs(*a) {
                    let mut ga = Matrix::zeros(x.rows(), x.rows());
                    matmul_bt_into(&gb, x, &mut ga);
                    accumulate(grads, *a, ga.scale(-1.0));
                }
                if needs(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::So3Exp(a) => {
                let w = val(*a);
                let d = w.data();
                let (_, jac) = so3_exp_jacobian([d[0], d[1], d[2]]);
                let mut gw = Matrix::zeros(w.rows(), w.cols());
                for (k, dk) in jac.iter().enumerate() {
                    let mut acc = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            acc += g.get(i, j) * dk[i][j];
                        }
                    }
                    gw.data_mut()[k] = acc;
                }
                accumulate(grads, *a, gw);
            }
            Op::InfoNce(a, anchors, terms) => {
                let x = val(*a);
                let scale = g.item() / *terms as f64;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for anc in anchors {
                    if anc.positives.is_empty() || anc.negatives.is_empty() {
                        continue;
                    }
                    let row = x.row(anc.row);
                    let m = anchor_max(row, anc);
                    let s_neg: f64 = anc.negatives.iter().map(|&c| (row[c] - m).exp()).sum();
                    for &p in &anc.positives {
                        let ep = (row[p] - m).exp();
                        let denom = ep + s_neg;
                        let cur = ga.get(anc.row, p);
                        ga.set(anc.row, p, cur + scale * (ep / denom - 1.0));
                        for &n in &anc.negatives {
                            let en = (row[n] - m).exp();
                            let cur = ga.get(anc.row, n);
                            ga.set(anc.row, n, cur + scale * en / denom);
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn add_if(grads: &mut [Option<Matrix>], needed: bool, id: usize, g: impl FnOnce() -> Matrix) {
    if needed {
        accumulate(grads, id, g());
    }
}

fn anchor_max(row: &[f64], a: &ContrastiveAnchor) -> f64 {
    a.positives
        .iter()
        .chain(&a.negatives)
        .map(|&c| row[c])
        .fold(f64::NEG_INFINITY, f64::max)
}

fn reduce_count(a: Tensor, axis: Axis) -> usize {
    reduce_count_shape(a.rows, a.cols, axis)
}

fn reduce_count_shape(rows: usize, cols: usize, axis: Axis) -> usize {
    match axis {
        Axis::All => rows * cols,
        Axis::Rows => rows,
        Axis::Cols => cols,
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn huber_value(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn dense_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let am = DMatrix::from_row_slice(n, n, a.data());
    let bm = DMatrix::from_row_slice(b.rows(), b.cols(), b.data());
    let x = am
        .lu()
        .solve(&bm)
        .ok_or_else(|| Error::Solver(format!("singular {n}x{n} system")))?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Solver(format!("non-finite solution of {n}x{n} system")));
    }
    let mut out = Matrix::zeros(b.rows(), b.cols());
    for r in 0..b.rows() {
        for c in 0..b.cols() {
            out.set(r, c, x[(r, c)]);
        }
    }
    Ok(out)
}

type Mat3 = [[f64; 3]; 3];

fn skew(w: [f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

/// Rodrigues rotation `I + A·K + B·K²` with `K = [ω]×` together with
/// `∂R/∂ω_k` for k = 0..3. Series expansions take over below θ = 1e-2.
pub(crate) fn so3_exp_jacobian(w: [f64; 3]) -> (Mat3, [Mat3; 3]) {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let t = t2.sqrt();
    // a = sinθ/θ, b = (1-cosθ)/θ², da = a'(θ)/θ, db = b'(θ)/θ
    let (a, b, da, db) = if t < 1e-2 {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = t.sin_cos();
        (
            s / t,
            (1.0 - c) / t2,
            (t * c - s) / (t2 * t),
            (t * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    };
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a * k[i][j] + b * k2[i][j] + if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut jac = [[[0.0; 3]; 3]; 3];
    for (kk, dk) in jac.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[kk] = 1.0;
        let ek = skew(e);
        let ek_k = mat3_mul(&ek, &k);
        let k_ek = mat3_mul(&k, &ek);
        for i in 0..3 {
            for j in 0..3 {
                dk[i][j] = da * w[kk] * k[i][j]
                    + a * ek[i][j]
                    + db * w[kk] * k2[i][j]
                    + b * (ek_k[i][j] + k_ek[i][j]);
            }
        }
    }
    (r, jac)
}
