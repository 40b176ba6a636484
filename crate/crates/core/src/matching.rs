//! Cross-modal similarity, contrastive and overlap losses, and point-to-pixel
//! matching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, ContrastiveAnchor, Matrix, ReduceKind, Tape, Tensor};
use crate::encoder::{affine, Features};
use crate::error::{Error, Result};
use crate::params::{init_weight, BoundParams, ParamStore};
use crate::scene::PointPairs;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    /// Symmetric bilinear form `W_f = (B + Bᵀ)/2`.
    Learnable,
    /// Plain cosine similarity; `W_f` is ignored.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub tau: f64,
    pub theta_point: f64,
    pub theta_pixel: f64,
    /// Feed τ-scaled logits to the soft-assignment softmax. When false the
    /// raw bilinear scores are used.
    pub scale_soft_logits: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            tau: 0.07,
            theta_point: 0.5,
            theta_pixel: 0.5,
            scale_soft_logits: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, t) in [("theta_point", self.theta_point), ("theta_pixel", self.theta_pixel)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }
}

/// Adds the alignment matrix `B` and the two overlap heads to `store`.
pub fn init_params<R: Rng + ?Sized>(rng: &mut R, channels: usize, store: &mut ParamStore) {
    store.insert("align.b", init_weight(rng, channels, channels));
    for m in ["point", "pixel"] {
        store.insert(format!("head.{m}.w"), init_weight(rng, channels, 1));
        store.insert(format!("head.{m}.b"), Matrix::zeros(1, 1));
    }
}

/// `W_f = (B + Bᵀ)/2`, symmetric bit for bit.
pub fn alignment_matrix(tape: &mut Tape, b: Tensor) -> Result<Tensor> {
    let bt = tape.transpose(b);
    let s = tape.add(b, bt)?;
    Ok(tape.scale(s, 0.5))
}

/// Scales every row to unit length. A zero row is rejected.
pub fn normalize_rows(tape: &mut Tape, x: Tensor) -> Result<Tensor> {
    let v = tape.value(x);
    for r in 0..v.rows() {
        if v.row(r).iter().all(|&e| e == 0.0) {
            return Err(Error::ZeroNorm { row: r });
        }
    }
    let sq = tape.mul(x, x)?;
    let ss = tape.reduce(sq, ReduceKind::Sum, Axis::Cols)?;
    let norm = tape.sqrt(ss)?;
    let norm = tape.repeat_cols(norm, x.cols())?;
    tape.div(x, norm)
}

/// N×M logits between row-normalized point and pixel features, divided by τ.
/// `wf` is required in learnable mode and ignored in cosine mode.
pub fn similarity(
    tape: &mut Tape,
    points: Tensor,
    pixels: Tensor,
    wf: Option<Tensor>,
    mode: AlignmentMode,
    tau: f64,
) -> Result<Tensor> {
    let p = normalize_rows(tape, points)?;
    let i = normalize_rows(tape, pixels)?;
    let left = match mode {
        AlignmentMode::Learnable => {
            let wf = wf.ok_or_else(|| {
                Error::Parameter("learnable similarity needs an alignment matrix".into())
            })?;
            tape.matmul(p, wf)?
        }
        AlignmentMode::Cosine => p,
    };
    let it = tape.transpose(i);
    let raw = tape.matmul(left, it)?;
    Ok(tape.scale(raw, 1.0 / tau))
}

fn anchors(pairs: &[PointPairs]) -> Vec<ContrastiveAnchor> {
    pairs
        .iter()
        .map(|a| ContrastiveAnchor {
            row: a.point,
            positives: a.positives.clone(),
            negatives: a.negatives.clone(),
        })
        .collect()
}

/// InfoNCE with point anchors over an N×M logit matrix.
pub fn info_nce_points(tape: &mut Tape, logits: Tensor, pairs: &[PointPairs]) -> Result<Tensor> {
    tape.info_nce(logits, &anchors(pairs))
}

/// InfoNCE with pixel anchors; `pixel_pairs` comes from `PairSet::by_pixel`.
pub fn info_nce_pixels(
    tape: &mut Tape,
    logits: Tensor,
    pixel_pairs: &[PointPairs],
) -> Result<Tensor> {
    let t = tape.transpose(logits);
    tape.info_nce(t, &anchors(pixel_pairs))
}

/// Overlap probabilities `(S^P, S^I)` as N×1 and M×1 columns.
pub fn overlap_scores(
    tape: &mut Tape,
    params: &BoundParams,
    feats: Features,
) -> Result<(Tensor, Tensor)> {
    let mut head = |x: Tensor, m: &str| -> Result<Tensor> {
        let z = affine(
            tape,
            x,
            params.get(&format!("head.{m}.w")),
            params.get(&format!("head.{m}.b")),
        )?;
        Ok(tape.sigmoid(z))
    };
    let sp = head(feats.points, "point")?;
    let si = head(feats.pixels, "pixel")?;
    Ok((sp, si))
}

fn mean_bce(tape: &mut Tape, s: Tensor, labels: &[bool]) -> Result<Tensor> {
    if labels.len() != s.len() {
        return Err(Error::Dimension(format!(
            "{} overlap labels for {} scores",
            labels.len(),
            s.len()
        )));
    }
    let s = tape.clamp(s, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let y = Matrix::from_vec(s.rows(), s.cols(), labels.iter().map(|&b| b as u8 as f64).collect())?;
    let not_y = y.map(|v| 1.0 - v);
    let y = tape.constant(y);
    let not_y = tape.constant(not_y);
    let log_s = tape.log(s)?;
    let neg = tape.neg(s);
    let one_minus = tape.offset(neg, 1.0);
    let log_1s = tape.log(one_minus)?;
    let a = tape.mul(y, log_s)?;
    let b = tape.mul(not_y, log_1s)?;
    let ll = tape.add(a, b)?;
    let m = tape.mean(ll)?;
    Ok(tape.neg(m))
}

/// Mean BCE over points plus mean BCE over pixels.
pub fn overlap_bce_loss(
    tape: &mut Tape,
    sp: Tensor,
    si: Tensor,
    point_labels: &[bool],
    pixel_labels: &[bool],
) -> Result<Tensor> {
    let lp = mean_bce(tape, sp, point_labels)?;
    let li = mean_bce(tape, si, pixel_labels)?;
    tape.add(lp, li)
}

/// Indices whose score strictly exceeds `theta`.
pub fn threshold(scores: &[f64], theta: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] > theta).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapSelection {
    pub points: Vec<usize>,
    pub pixels: Vec<usize>,
    pub point_fallback: bool,
    pub pixel_fallback: bool,
}

/// Thresholds both score sets, falling back to the supplied masks when a
/// predicted point set has fewer than `min_points` entries or a pixel set is
/// empty.
pub fn threshold_overlap(
    sp: &[f64],
    si: &[f64],
    cfg: &MatchConfig,
    fallback_points: &[usize],
    fallback_pixels: &[usize],
    min_points: usize,
) -> OverlapSelection {
    let mut points = threshold(sp, cfg.theta_point);
    let mut pixels = threshold(si, cfg.theta_pixel);
    let point_fallback = points.len() < min_points.max(1);
    let pixel_fallback = pixels.is_empty();
    if point_fallback {
        points = fallback_points.to_vec();
    }
    if pixel_fallback {
        pixels = fallback_pixels.to_vec();
    }
    OverlapSelection {
        points,
        pixels,
        point_fallback,
        pixel_fallback,
    }
}

/// Soft assignment over the selected pixels. Returns the weights
/// (|P_o|×|I_o|) and the predicted coordinates (|P_o|×2).
pub fn soft_match(
    tape: &mut Tape,
    logits: Tensor,
    points: &[usize],
    pixels: &[usize],
    pixel_centers: &Matrix,
    cfg: &MatchConfig,
) -> Result<(Tensor, Tensor)> {
    if points.is_empty() || pixels.is_empty() {
        return Err(Error::DegenerateBatch("soft match over an empty overlap set".into()));
    }
    let rows = tape.gather_rows(logits, points)?;
    let mut sub = tape.gather_cols(rows, pixels)?;
    if !cfg.scale_soft_logits {
        sub = tape.scale(sub, cfg.tau);
    }
    let w = tape.softmax_rows(sub)?;
    let centers = tape.constant(pixel_centers.select_rows(pixels));
    let coords = tape.matmul(w, centers)?;
    Ok((w, coords))
}

/// Center of the highest-logit selected pixel per point; ties go to the
/// lowest pixel index.
pub fn hard_match(
    logits: &Matrix,
    points: &[usize],
    pixels: &[usize],
    pixel_centers: &Matrix,
) -> Result<Matrix> {
    if points.is_empty() || pixels.is_empty() {
        return Err(Error::DegenerateBatch("hard match over an empty overlap set".into()));
    }
    let mut sorted = pixels.to_vec();
    sorted.sort_unstable();
    let mut out = Matrix::zeros(points.len(), 2);
    for (r, &i) in points.iter().enumerate() {
        let row = logits.row(i);
        let mut best = sorted[0];
        for &j in &sorted[1..] {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.set(r, 0, pixel_centers.get(best, 0));
        out.set(r, 1, pixel_centers.get(best, 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::autodiff::finite_difference_check;
    use proptest::prelude::*;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_transform_matches_cosine_bitwise() {
        let mut t = Tape::new();
        let p = t.constant(rand_matrix(5, 4, 1));
        let i = t.constant(rand_matrix(7, 4, 2));
        let b = t.constant(Matrix::identity(4));
        let wf = alignment_matrix(&mut t, b).unwrap();
        let l = similarity(&mut t, p, i, Some(wf), AlignmentMode::Learnable, 1.0).unwrap();
        let c = similarity(&mut t, p, i, None, AlignmentMode::Cosine, 1.0).unwrap();
        assert_eq!(t.value(l), t.value(c));
    }

    #[test]
    fn identical_features_give_inverse_temperature() {
        let mut t = Tape::new();
        let f = t.constant(Matrix::from_rows(&[[3.0, 4.0]]));
        let l = similarity(&mut t, f, f, None, AlignmentMode::Cosine, 0.07).unwrap();
        assert!((t.scalar(l) - 1.0 / 0.07).abs() < 1e-12);
        assert!((t.scalar(l) - 14.2857).abs() < 1e-4);
    }

    #[test]
    fn alignment_is_symmetric_and_transposes() {
        let mut t = Tape::new();
        let b = t.constant(rand_matrix(6, 6, 3));
        let wf = alignment_matrix(&mut t, b).unwrap();
        let w = t.value(wf).clone();
        assert_eq!(w, w.transpose());

        let a = t.constant(rand_matrix(4, 6, 4));
        let c = t.constant(rand_matrix(5, 6, 5));
        let ab = similarity(&mut t, a, c, Some(wf), AlignmentMode::Learnable, 0.07).unwrap();
        let ba = similarity(&mut t, c, a, Some(wf), AlignmentMode::Learnable, 0.07).unwrap();
        let ab = t.value(ab).clone();
        let ba = t.value(ba).transpose();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn zero_rows_are_rejected_by_index() {
        let mut t = Tape::new();
        let mut m = rand_matrix(3, 4, 6);
        for c in 0..4 {
            m.set(2, c, 0.0);
        }
        let x = t.constant(m);
        assert!(matches!(normalize_rows(&mut t, x), Err(Error::ZeroNorm { row: 2 })));
    }

    fn pp(point: usize, positives: &[usize], negatives: &[usize]) -> PointPairs {
        PointPairs {
            point,
            positives: positives.to_vec(),
            negatives: negatives.to_vec(),
        }
    }

    #[test]
    fn info_nce_values() {
        let mut t = Tape::new();
        let l = t.constant(Matrix::filled(1, 4, 0.3));
        let v = info_nce_points(&mut t, l, &[pp(0, &[0], &[1, 2, 3])]).unwrap();
        assert!((t.scalar(v) - 4f64.ln()).abs() < 1e-12);

        // Two anchors, computed by hand.
        let logits = Matrix::from_rows(&[[2.0, 0.0, 1.0], [0.5, -1.0, 3.0]]);
        let l = t.constant(logits);
        let pairs = [pp(0, &[0], &[1, 2]), pp(1, &[2], &[0])];
        let v = info_nce_points(&mut t, l, &pairs).unwrap();
        let a = -(2f64.exp() / (2f64.exp() + 1.0 + 1f64.exp())).ln();
        let b = -(3f64.exp() / (3f64.exp() + 0.5f64.exp())).ln();
        assert!((t.scalar(v) - (a + b) / 2.0).abs() < 1e-12);

        // Pixel direction reads columns.
        let v = info_nce_pixels(&mut t, l, &[pp(2, &[1], &[0])]).unwrap();
        let c = -(3f64.exp() / (3f64.exp() + 1f64.exp())).ln();
        assert!((t.scalar(v) - c).abs() < 1e-12);

        let none = info_nce_points(&mut t, l, &[pp(0, &[], &[1])]);
        assert!(matches!(none, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn info_nce_saturates() {
        let mut last = f64::INFINITY;
        for pos in [5.0, 10.0, 20.0] {
            let mut t = Tape::new();
            let l = t.constant(Matrix::from_rows(&[[pos, 0.0, 0.0]]));
            let v = info_nce_points(&mut t, l, &[pp(0, &[0], &[1, 2])]).unwrap();
            let v = t.scalar(v);
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn overlap_heads_and_bce() {
        let mut store = ParamStore::new();
        store.insert("head.point.w", Matrix::zeros(4, 1));
        store.insert("head.point.b", Matrix::zeros(1, 1));
        store.insert("head.pixel.w", Matrix::zeros(4, 1));
        store.insert("head.pixel.b", Matrix::zeros(1, 1));
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let feats = Features {
            points: t.constant(rand_matrix(5, 4, 7)),
            pixels: t.constant(rand_matrix(9, 4, 8)),
        };
        let (sp, si) = overlap_scores(&mut t, &p, feats).unwrap();
        assert!(t.value(sp).data().iter().all(|&v| v == 0.5));
        assert_eq!(si.shape(), (9, 1));
        let lp = [true, false, true, true, false];
        let li = [false; 9];
        let l = overlap_bce_loss(&mut t, sp, si, &lp, &li).unwrap();
        assert!((t.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_scalar_loop_and_saturates() {
        let s = [0.9, 0.2, 0.6, 1.0, 0.0];
        let y = [true, false, false, true, false];
        let si = [0.3, 0.7];
        let yi = [true, false];
        let naive = |s: &[f64], y: &[bool]| {
            let mut acc = 0.0;
            for (&p, &l) in s.iter().zip(y) {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                acc -= if l { p.ln() } else { (1.0 - p).ln() };
            }
            acc / s.len() as f64
        };
        let mut t = Tape::new();
        let a = t.constant(Matrix::column(&s));
        let b = t.constant(Matrix::column(&si));
        let l = overlap_bce_loss(&mut t, a, b, &y, &yi).unwrap();
        let expect = naive(&s, &y) + naive(&si, &yi);
        assert!((t.scalar(l) - expect).abs() < 1e-12);

        let mut t = Tape::new();
        let a = t.constant(Matrix::column(&[1.0, 0.0]));
        let b = t.constant(Matrix::column(&[0.0]));
        let l = overlap_bce_loss(&mut t, a, b, &[true, false], &[false]).unwrap();
        assert!(t.scalar(l) < 1e-6);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let fp = rand_matrix(6, 4, 9);
        let fi = rand_matrix(8, 4, 10);
        let lp = [true, false, true, false, false, true];
        let li = [true, true, false, false, true, false, false, true];
        let names: Vec<String> = ["head.point.w", "head.point.b", "head.pixel.w", "head.pixel.b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let params = [
            rand_matrix(4, 1, 11),
            Matrix::scalar(0.1),
            rand_matrix(4, 1, 12),
            Matrix::scalar(-0.2),
        ];
        let report = finite_difference_check(
            |t, ts| {
                let p = BoundParams::from_parts(&names, ts);
                let feats = Features {
                    points: t.constant(fp.clone()),
                    pixels: t.constant(fi.clone()),
                };
                let (sp, si) = overlap_scores(t, &p, feats)?;
                overlap_bce_loss(t, sp, si, &lp, &li)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn threshold_and_fallback() {
        let cfg = MatchConfig::default();
        let s = [0.9; 8];
        let sel = threshold_overlap(&s, &s, &cfg, &[1], &[2], 6);
        assert_eq!(sel.points, (0..8).collect::<Vec<_>>());
        assert!(!sel.point_fallback && !sel.pixel_fallback);

        let strict = MatchConfig {
            theta_point: 0.99,
            theta_pixel: 0.99,
            ..cfg
        };
        let sel = threshold_overlap(&s, &s, &strict, &[1, 3], &[2], 1);
        assert!(sel.point_fallback && sel.pixel_fallback);
        assert_eq!(sel.points, vec![1, 3]);
        assert_eq!(sel.pixels, vec![2]);
    }

    #[test]
    fn soft_match_cases() {
        let centers = crate::scene::pixel_centers(4, 4);
        let cfg = MatchConfig::default();
        let mut t = Tape::new();
        let l = t.constant(rand_matrix(3, 16, 13));
        let (w, c) = soft_match(&mut t, l, &[1], &[6], &centers, &cfg).unwrap();
        assert_eq!(t.value(w).item(), 1.0);
        assert_eq!(t.value(c).row(0), centers.row(6));

        // Pixels 0, 1, 4, 5 form a unit square.
        let l = t.constant(Matrix::filled(2, 16, 0.7));
        let (_, c) = soft_match(&mut t, l, &[0, 1], &[0, 1, 4, 5], &centers, &cfg).unwrap();
        assert_eq!(t.value(c).row(1), &[0.5, 0.5]);
    }

    #[test]
    fn unscaled_soft_logits_divide_out_tau() {
        let centers = crate::scene::pixel_centers(3, 3);
        let logits = rand_matrix(2, 9, 14);
        let cfg = MatchConfig {
            scale_soft_logits: false,
            ..MatchConfig::default()
        };
        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let (w, _) = soft_match(&mut t, l, &[0], &[0, 4], &centers, &cfg).unwrap();
        let (a, b) = (logits.get(0, 0) * cfg.tau, logits.get(0, 4) * cfg.tau);
        let expect = a.exp() / (a.exp() + b.exp());
        assert!((t.value(w).get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn hard_match_ties_and_limit() {
        let centers = crate::scene::pixel_centers(3, 4);
        let mut logits = Matrix::zeros(1, 12);
        logits.set(0, 3, 2.0);
        logits.set(0, 7, 2.0);
        let c = hard_match(&logits, &[0], &[7, 3, 5], &centers).unwrap();
        assert_eq!(c.row(0), centers.row(3));

        let logits = rand_matrix(4, 12, 15);
        let pts = [0, 1, 2, 3];
        let pix: Vec<usize> = (0..12).collect();
        let hard = hard_match(&logits, &pts, &pix, &centers).unwrap();
        let mut t = Tape::new();
        let l = t.constant(logits.scale(1e3));
        let (_, soft) = soft_match(&mut t, l, &pts, &pix, &centers, &MatchConfig::default()).unwrap();
        for (a, b) in t.value(soft).data().iter().zip(hard.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn soft_weights_are_convex(seed in 0u64..1000, n_pix in 1usize..10) {
            let centers = crate::scene::pixel_centers(4, 4);
            let logits = rand_matrix(3, 16, seed).scale(20.0);
            let pixels: Vec<usize> = (0..n_pix).map(|k| (k * 7 + seed as usize) % 16).collect();
            let mut pixels = pixels;
            pixels.sort_unstable();
            pixels.dedup();
            let mut t = Tape::new();
            let l = t.constant(logits.clone());
            let (w, c) = soft_match(&mut t, l, &[0, 2], &pixels, &centers, &MatchConfig::default()).unwrap();
            let w = t.value(w).clone();
            let c = t.value(c).clone();
            for r in 0..2 {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                // Brute-force weighted sum, and bounding-box membership.
                let mut u = 0.0;
                let mut v = 0.0;
                for (k, &j) in pixels.iter().enumerate() {
                    u += w.get(r, k) * centers.get(j, 0);
                    v += w.get(r, k) * centers.get(j, 1);
                }
                prop_assert!((u - c.get(r, 0)).abs() < 1e-12 && (v - c.get(r, 1)).abs() < 1e-12);
                let xs = pixels.iter().map(|&j| centers.get(j, 0));
                let lo = xs.clone().fold(f64::INFINITY, f64::min);
                let hi = xs.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c.get(r, 0) >= lo - 1e-12 && c.get(r, 0) <= hi + 1e-12);
            }
        }

        #[test]
        fn info_nce_decreases_with_positive_logit(seed in 0u64..1000, bump in 0.01f64..3.0) {
            let logits = rand_matrix(1, 5, seed);
            let pairs = [pp(0, &[1], &[0, 2, 3, 4])];
            let mut t = Tape::new();
            let a = t.constant(logits.clone());
            let before = { let v = info_nce_points(&mut t, a, &pairs).unwrap(); t.scalar(v) };
            let mut up = logits;
            up.set(0, 1, up.get(0, 1) + bump);
            let b = t.constant(up);
            let after = { let v = info_nce_points(&mut t, b, &pairs).unwrap(); t.scalar(v) };
            prop_assert!(after < before);
        }
    }
}
