use super::matrix::Matrix;
use super::tape::{Tape, Tensor};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - central| / max(1e-12, |central|)` over every entry.
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_central: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error used by every gradient check in the crate.
pub fn relative_error(analytic: f64, central: f64) -> f64 {
    (analytic - central).abs() / central.abs().max(1e-12)
}

/// Checks the gradient of a scalar loss with respect to `params`.
///
/// `f` builds the loss on a fresh tape from leaf tensors holding the
/// parameter values; it is called once for the analytic sweep and twice per
/// parameter entry for the central differences.
pub fn finite_difference_check<F>(f: F, params: &[Matrix], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    finite_difference_check_on(Tape::new, f, params, h)
}

/// Same as [`finite_difference_check`] with a caller-supplied tape factory,
/// which the fault-injection tests use.
pub fn finite_difference_check_on<F, T>(
    new_tape: T,
    f: F,
    params: &[Matrix],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
    T: Fn() -> Tape,
{
    let mut tape = new_tape();
    let leaves: Vec<Tensor> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let ls: Vec<Tensor> = values.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&mut t, &ls)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_central: 0.0,
        entries: 0,
    };
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let central = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let err = relative_error(a, central);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, k));
                report.worst_analytic = a;
                report.worst_central = central;
            }
        }
    }
    Ok(report)
}
