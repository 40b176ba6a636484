//! Registration and matching metrics, and dataset evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape};
use crate::encoder::{EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::geometry::RigidPose;
use crate::matching::{self, AlignmentMode, MatchConfig, MatchMode};
use crate::model::forward;
use crate::params::ParamStore;
use crate::pnp::{solve_pose_values, DEFAULT_GN_ITERS, MIN_CORRESPONDENCES};
use crate::scene::SceneSample;

pub const ACCURACY_THRESHOLD_PX: f64 = 5.0;

/// Translation error ‖t_gt − t̂‖ in metres.
pub fn rte(est: &RigidPose, gt: &RigidPose) -> f64 {
    (gt.translation - est.translation).norm()
}

/// Extrinsic x-y-z Euler angles (radians) with `R = Rz(γ)·Ry(β)·Rx(α)`.
/// At gimbal lock γ is set to 0 and α absorbs the remaining rotation.
pub fn euler_xyz(r: &Matrix3<f64>) -> [f64; 3] {
    let s = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let beta = s.asin();
    if (1.0 - s.abs()) < 1e-12 {
        return [(-r[(1, 2)]).atan2(r[(1, 1)]), beta, 0.0];
    }
    [r[(2, 1)].atan2(r[(2, 2)]), beta, r[(1, 0)].atan2(r[(0, 0)])]
}

/// Sum of absolute Euler angles of `R_gtᵀ R̂`, in degrees.
pub fn rre(est: &RigidPose, gt: &RigidPose) -> f64 {
    let d = gt.rotation.transpose() * est.rotation;
    euler_xyz(&d).iter().map(|a| a.abs()).sum::<f64>().to_degrees()
}

/// Geodesic angle of `R_gtᵀ R̂`, in degrees.
pub fn rre_geodesic(est: &RigidPose, gt: &RigidPose) -> f64 {
    crate::geometry::rotation_angle(&(gt.rotation.transpose() * est.rotation)).to_degrees()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationMetric {
    #[default]
    EulerSum,
    Geodesic,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Fraction of errors strictly below each threshold. Non-finite errors
/// (failed solves) never count as recalled.
pub fn registration_recall(errors: &[f64], thresholds: &[f64]) -> Result<RecallCurve> {
    if errors.is_empty() {
        return Err(Error::Parameter("recall over an empty report set".into()));
    }
    let n = errors.len() as f64;
    let recall = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / n)
        .collect();
    Ok(RecallCurve {
        thresholds: thresholds.to_vec(),
        recall,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MatchingStats {
    pub error: MeanStd,
    /// Fraction of matches within [`ACCURACY_THRESHOLD_PX`].
    pub accuracy: f64,
    pub count: usize,
}

/// Per-point Euclidean errors between matched and ground-truth coordinates.
pub fn match_errors(pred: &Matrix, gt: &Matrix) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() || pred.cols() != 2 {
        return Err(Error::Dimension(format!(
            "matched coords {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok((0..pred.rows())
        .map(|i| {
            let du = pred.get(i, 0) - gt.get(i, 0);
            let dv = pred.get(i, 1) - gt.get(i, 1);
            (du * du + dv * dv).sqrt()
        })
        .collect())
}

pub fn stats_from_errors(errors: &[f64]) -> Result<MatchingStats> {
    let error = MeanStd::of(errors)
        .ok_or_else(|| Error::Parameter("matching stats need at least one match".into()))?;
    let hits = errors.iter().filter(|&&e| e < ACCURACY_THRESHOLD_PX).count();
    Ok(MatchingStats {
        error,
        accuracy: hits as f64 / errors.len() as f64,
        count: errors.len(),
    })
}

pub fn matching_stats(pred: &Matrix, gt: &Matrix) -> Result<MatchingStats> {
    stats_from_errors(&match_errors(pred, gt)?)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity per (point, pixel) pair. In learnable mode the point
/// feature is mapped through `W_f` first.
pub fn pair_similarities(
    points: &Matrix,
    pixels: &Matrix,
    wf: Option<&Matrix>,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            let p = unit(points.row(i))?;
            let mapped = match wf {
                Some(w) => {
                    let c = w.cols();
                    (0..c)
                        .map(|col| (0..c).map(|k| p[k] * w.get(k, col)).sum())
                        .collect()
                }
                None => p,
            };
            let a = unit(&mapped)?;
            let b = unit(pixels.row(j))?;
            Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
        })
        .collect()
}

pub fn similarity_stats(
    points: &Matrix,
    pixels: &Matrix,
    wf: Option<&Matrix>,
    pairs: &[(usize, usize)],
) -> Result<MeanStd> {
    MeanStd::of(&pair_similarities(points, pixels, wf, pairs)?)
        .ok_or_else(|| Error::Parameter("similarity stats need at least one pair".into()))
}

/// One cell of the matching ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ablation {
    pub alignment: AlignmentMode,
    pub matching: MatchMode,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::new(AlignmentMode::Cosine, MatchMode::Hard),
        Ablation::new(AlignmentMode::Cosine, MatchMode::Soft),
        Ablation::new(AlignmentMode::Learnable, MatchMode::Hard),
        Ablation::new(AlignmentMode::Learnable, MatchMode::Soft),
    ];

    pub const fn new(alignment: AlignmentMode, matching: MatchMode) -> Self {
        Ablation {
            alignment,
            matching,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.alignment, self.matching) {
            (AlignmentMode::Cosine, MatchMode::Hard) => "cosine-hard",
            (AlignmentMode::Cosine, MatchMode::Soft) => "cosine-soft",
            (AlignmentMode::Learnable, MatchMode::Hard) => "learnable-hard",
            (AlignmentMode::Learnable, MatchMode::Soft) => "learnable-soft",
        }
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.name().to_string()
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation {s:?}; expected cosine-hard, cosine-soft, learnable-hard or learnable-soft"
                ))
            })
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub ablation: Ablation,
    /// Restrict matching and pose estimation to predicted overlap.
    pub use_overlap: bool,
    /// Std of Gaussian noise (px) added to matched targets before PnP.
    pub target_noise: f64,
    pub noise_seed: u64,
    pub gn_iters: usize,
    pub rotation_metric: RotationMetric,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ablation: Ablation::new(AlignmentMode::Learnable, MatchMode::Soft),
            use_overlap: true,
            target_noise: 0.0,
            noise_seed: 0,
            gn_iters: DEFAULT_GN_ITERS,
            rotation_metric: RotationMetric::EulerSum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneReport {
    pub scene: usize,
    /// NaN when the pose solve failed.
    pub rte: f64,
    pub rre: f64,
    pub pose_error: Option<String>,
    pub matching: Option<MatchingStats>,
    #[serde(skip)]
    pub match_errors: Vec<f64>,
    #[serde(skip)]
    pub similarities: Vec<f64>,
}

/// Nearest pixel index to a ground-truth projection.
fn nearest_pixel(uv: [f64; 2], h: usize, w: usize) -> usize {
    let u = uv[0].round().clamp(0.0, (w - 1) as f64) as usize;
    let v = uv[1].round().clamp(0.0, (h - 1) as f64) as usize;
    v * w + u
}

/// Indices of the `k` highest scores, ties to the lower index, ascending.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn evaluate_scene(
    params: &ParamStore,
    enc: &EncoderConfig,
    mcfg: &MatchConfig,
    scene: &SceneSample,
    scene_id: usize,
    opts: &EvalOptions,
) -> Result<SceneReport> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let input = EncoderInput::from_sample(scene);
    let f = forward(&mut tape, &p, enc, &input, opts.ablation.alignment, mcfg.tau)?;
    let logits = tape.value(f.logits).clone();
    let sp = tape.value(f.point_scores).data().to_vec();
    let si = tape.value(f.pixel_scores).data().to_vec();
    let centers = scene.pixel_centers();

    let pixels = if opts.use_overlap {
        let sel = matching::threshold(&si, mcfg.theta_pixel);
        if sel.is_empty() {
            (0..scene.num_pixels()).collect()
        } else {
            sel
        }
    } else {
        (0..scene.num_pixels()).collect()
    };
    let match_coords = |tape: &mut Tape, pts: &[usize]| -> Result<Matrix> {
        match opts.ablation.matching {
            MatchMode::Hard => matching::hard_match(&logits, pts, &pixels, &centers),
            MatchMode::Soft => {
                let (_, c) = matching::soft_match(tape, f.logits, pts, &pixels, &centers, mcfg)?;
                Ok(tape.value(c).clone())
            }
        }
    };

    let gt_points = scene.overlapping_points();
    let (match_errors, matching) = if gt_points.is_empty() {
        (Vec::new(), None)
    } else {
        let pred = match_coords(&mut tape, &gt_points)?;
        let gt = scene.gt_projection.select_rows(&gt_points);
        let e = match_errors(&pred, &gt)?;
        let s = stats_from_errors(&e)?;
        (e, Some(s))
    };

    let fp = tape.value(f.feats.points).clone();
    let fi = tape.value(f.feats.pixels).clone();
    let wf = tape.value(f.wf).clone();
    let pairs: Vec<(usize, usize)> = gt_points
        .iter()
        .map(|&i| (i, nearest_pixel(scene.gt_coord(i), scene.grid_height(), scene.grid_width())))
        .collect();
    let wf_opt = match opts.ablation.alignment {
        AlignmentMode::Learnable => Some(&wf),
        AlignmentMode::Cosine => None,
    };
    let similarities = pair_similarities(&fp, &fi, wf_opt, &pairs)?;

    let pose_points = if opts.use_overlap {
        let sel = matching::threshold(&sp, mcfg.theta_point);
        if sel.len() < MIN_CORRESPONDENCES {
            top_k(&sp, MIN_CORRESPONDENCES)
        } else {
            sel
        }
    } else {
        (0..scene.num_points()).collect()
    };
    let mut targets = match_coords(&mut tape, &pose_points)?;
    if opts.target_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
        rng.set_stream(scene_id as u64);
        for v in targets.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += opts.target_noise * z;
        }
    }
    let pts = scene.points.select_rows(&pose_points);
    let (rte_v, rre_v, pose_error) =
        match solve_pose_values(&pts, &targets, &scene.intrinsics, opts.gn_iters) {
            Ok(est) => {
                let r = match opts.rotation_metric {
                    RotationMetric::EulerSum => rre(&est.pose, &scene.raw_pose),
                    RotationMetric::Geodesic => rre_geodesic(&est.pose, &scene.raw_pose),
                };
                (rte(&est.pose, &scene.raw_pose), r, None)
            }
            Err(e) => (f64::NAN, f64::NAN, Some(e.to_string())),
        };

    Ok(SceneReport {
        scene: scene_id,
        rte: rte_v,
        rre: rre_v,
        pose_error,
        matching,
        match_errors,
        similarities,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub ablation: &'static str,
    pub scenes: Vec<SceneReport>,
    pub rte_recall: RecallCurve,
    pub rre_recall: RecallCurve,
    /// Pooled over every evaluated point of every scene.
    pub matching: Option<MatchingStats>,
    pub similarity: Option<MeanStd>,
    pub pose_failures: usize,
    pub mean_rte: f64,
    pub mean_rre: f64,
}

pub const RTE_THRESHOLDS: [f64; 10] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0, 7.5, 10.0];
pub const RRE_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 5.0, 7.5, 10.0, 15.0, 20.0, 30.0, 45.0];

/// Mean over finite entries; failed solves count as `penalty` when given.
fn mean_with_failures(values: &[f64], penalty: Option<f64>) -> f64 {
    let v: Vec<f64> = values
        .iter()
        .filter_map(|&x| if x.is_finite() { Some(x) } else { penalty })
        .collect();
    MeanStd::of(&v).map_or(f64::NAN, |m| m.mean)
}

pub fn evaluate(
    params: &ParamStore,
    enc: &EncoderConfig,
    mcfg: &MatchConfig,
    scenes: &[SceneSample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Parameter("evaluation needs at least one scene".into()));
    }
    let reports = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            evaluate_scene(params, enc, mcfg, s, i, opts).map_err(|e| e.in_scene(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let rtes: Vec<f64> = reports.iter().map(|r| r.rte).collect();
    let rres: Vec<f64> = reports.iter().map(|r| r.rre).collect();
    let errs: Vec<f64> = reports.iter().flat_map(|r| r.match_errors.iter().copied()).collect();
    let sims: Vec<f64> = reports.iter().flat_map(|r| r.similarities.iter().copied()).collect();
    Ok(EvalReport {
        ablation: opts.ablation.name(),
        rte_recall: registration_recall(&rtes, &RTE_THRESHOLDS)?,
        rre_recall: registration_recall(&rres, &RRE_THRESHOLDS)?,
        matching: stats_from_errors(&errs).ok(),
        similarity: MeanStd::of(&sims),
        pose_failures: reports.iter().filter(|r| r.pose_error.is_some()).count(),
        mean_rte: mean_with_failures(&rtes, None),
        mean_rre: mean_with_failures(&rres, None),
        scenes: reports,
    })
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".into()
    }
}

/// One row per scene.
pub fn scenes_csv(report: &EvalReport) -> String {
    let mut out = String::from("scene_id,rte_m,rre_deg,match_mean_px,match_std_px,acc_at_5px\n");
    for r in &report.scenes {
        let (m, s, a) = r
            .matching
            .map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.error.mean, m.error.std, m.accuracy));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.scene,
            num(r.rte),
            num(r.rre),
            num(m),
            num(s),
            num(a)
        );
    }
    out
}

pub fn curve_csv(curve: &RecallCurve) -> String {
    let mut out = String::from("threshold,recall\n");
    for (t, r) in curve.thresholds.iter().zip(&curve.recall) {
        let _ = writeln!(out, "{t},{r}");
    }
    out
}

/// Minimal step plot of a recall curve.
pub fn curve_svg(curve: &RecallCurve, label: &str) -> String {
    let (w, h, pad) = (320.0, 200.0, 30.0);
    let tmax = curve.thresholds.iter().cloned().fold(1e-12, f64::max);
    let pts: Vec<String> = curve
        .thresholds
        .iter()
        .zip(&curve.recall)
        .map(|(t, r)| {
            format!(
                "{:.2},{:.2}",
                pad + t / tmax * (w - 2.0 * pad),
                h - pad - r * (h - 2.0 * pad)
            )
        })
        .collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <polyline fill=\"none\" stroke=\"black\" points=\"{}\"/>\n\
         <text x=\"{pad}\" y=\"16\" font-size=\"12\">{label}</text>\n</svg>\n",
        pts.join(" ")
    )
}

pub fn write_report(dir: &Path, report: &EvalReport, svg: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    let tag = report.ablation;
    write(format!("eval_{tag}.csv"), scenes_csv(report))?;
    write(format!("recall_rte_{tag}.csv"), curve_csv(&report.rte_recall))?;
    write(format!("recall_rre_{tag}.csv"), curve_csv(&report.rre_recall))?;
    if svg {
        write(format!("recall_rte_{tag}.svg"), curve_svg(&report.rte_recall, "RTE recall"))?;
        write(format!("recall_rre_{tag}.svg"), curve_svg(&report.rre_recall, "RRE recall"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use crate::geometry::rotation_z;
    use proptest::prelude::*;

    fn axis_rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        crate::geometry::rotation_from_axis_angle(&axis.normalize(), angle).unwrap()
    }

    #[test]
    fn rte_values() {
        let gt = RigidPose::identity();
        assert_eq!(rte(&gt, &gt), 0.0);
        let est = RigidPose::new(Matrix3::identity(), Vector3::new(3.0, 4.0, 0.0));
        assert_eq!(rte(&est, &gt), 5.0);
        let a = Vector3::new(0.3, -1.2, 2.5);
        let b = Vector3::new(-0.7, 0.4, 1.0);
        let naive = ((0.3f64 + 0.7).powi(2) + (-1.2f64 - 0.4).powi(2) + (2.5f64 - 1.0).powi(2)).sqrt();
        let r = rte(
            &RigidPose::new(Matrix3::identity(), a),
            &RigidPose::new(Matrix3::identity(), b),
        );
        assert!((r - naive).abs() < 1e-15);
    }

    #[test]
    fn rre_values_and_gimbal_lock() {
        let gt = RigidPose::new(rotation_z(0.4), Vector3::zeros());
        assert_eq!(rre(&gt, &gt), 0.0);
        let est = RigidPose::new(gt.rotation * rotation_z(10f64.to_radians()), Vector3::zeros());
        assert!((rre(&est, &gt) - 10.0).abs() < 1e-9);

        let pitch = axis_rotation(Vector3::y(), std::f64::consts::FRAC_PI_2);
        let roll = axis_rotation(Vector3::x(), 0.3);
        let e = euler_xyz(&(pitch * roll));
        assert!((e[0] - 0.3).abs() < 1e-9 && e[2] == 0.0);
        assert!((e[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn euler_angles_rebuild_rotation() {
        let r = axis_rotation(Vector3::z(), 0.7)
            * axis_rotation(Vector3::y(), -0.4)
            * axis_rotation(Vector3::x(), 1.1);
        let e = euler_xyz(&r);
        assert!((e[0] - 1.1).abs() < 1e-12 && (e[1] + 0.4).abs() < 1e-12 && (e[2] - 0.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn euler_sum_bounds_geodesic(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..3.1
        ) {
            prop_assume!(ax * ax + ay * ay + az * az > 1e-3);
            let est = RigidPose::new(axis_rotation(Vector3::new(ax, ay, az), angle), Vector3::zeros());
            let gt = RigidPose::identity();
            prop_assert!(rre(&est, &gt) >= rre_geodesic(&est, &gt) - 1e-9);
        }

        #[test]
        fn recall_is_monotone_and_counts(errs in proptest::collection::vec(0.0f64..10.0, 1..40)) {
            let th = [0.0, 0.5, 1.0, 2.0, 5.0, f64::INFINITY];
            let c = registration_recall(&errs, &th).unwrap();
            prop_assert!(c.recall.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*c.recall.last().unwrap(), 1.0);
            for (t, r) in th.iter().zip(&c.recall) {
                let mut n = 0;
                for e in &errs {
                    if e < t {
                        n += 1;
                    }
                }
                prop_assert_eq!(*r, n as f64 / errs.len() as f64);
            }
        }
    }

    #[test]
    fn recall_endpoints() {
        let c = registration_recall(&[0.1, 0.2, f64::NAN], &[0.0, f64::INFINITY]).unwrap();
        assert_eq!(c.recall[0], 0.0);
        assert!((c.recall[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(registration_recall(&[], &[1.0]).is_err());
    }

    #[test]
    fn matching_stats_values() {
        let gt = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0]]);
        let s = matching_stats(&gt, &gt).unwrap();
        assert_eq!((s.error.mean, s.error.std, s.accuracy), (0.0, 0.0, 1.0));

        let pred = Matrix::from_rows(&[[4.0, 5.0], [2.0, 9.0]]);
        let s = matching_stats(&pred, &gt).unwrap();
        let e = [5.0, 7.0];
        assert_eq!(s.error.mean, 6.0);
        assert_eq!(s.error.std, ((e[0] - 6.0f64).powi(2) / 2.0 + (e[1] - 6.0f64).powi(2) / 2.0).sqrt());
        assert_eq!(s.accuracy, 0.0);
    }

    #[test]
    fn similarity_values() {
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]);
        let i = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]);
        let id = Matrix::identity(2);
        let s = similarity_stats(&p, &i, Some(&id), &[(0, 0), (1, 1)]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        let s = similarity_stats(&p, &i, None, &[(0, 1)]).unwrap();
        assert_eq!(s.mean, 0.0);

        let w = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let v = pair_similarities(&p, &i, Some(&w), &[(0, 1), (0, 0)]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("cosine".parse::<Ablation>().is_err());
    }

    #[test]
    fn csv_has_one_row_per_scene() {
        let report = EvalReport {
            ablation: "learnable-soft",
            scenes: (0..3)
                .map(|i| SceneReport {
                    scene: i,
                    rte: 0.5,
                    rre: f64::NAN,
                    pose_error: None,
                    matching: None,
                    match_errors: vec![],
                    similarities: vec![],
                })
                .collect(),
            rte_recall: registration_recall(&[0.5], &[1.0]).unwrap(),
            rre_recall: registration_recall(&[0.5], &[1.0]).unwrap(),
            matching: None,
            similarity: None,
            pose_failures: 0,
            mean_rte: 0.5,
            mean_rre: f64::NAN,
        };
        let csv = scenes_csv(&report);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0.5,nan,"));
        assert!(curve_svg(&report.rte_recall, "x").starts_with("<svg"));
    }
}
