//! Total loss, AdamW and the training loop.
//!
//! Every step draws a fresh augmentation, recomputes the ground-truth pose
//! for it, builds the loss on a new tape and applies one optimizer update.
//! Runs are deterministic given the dataset, the config and the seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Tensor};
use crate::encoder::{EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::geometry::{apply_augmentation, recompute_gt_pose, sample_augmentation, Augmentation};
use crate::matching::{self, AlignmentMode, MatchConfig};
use crate::model::{forward, init_model};
use crate::params::{BoundParams, ParamStore};
use crate::pnp::{pose_loss, solve_pose, RefineOptions, MIN_CORRESPONDENCES};
use crate::scene::{build_pairs, PointPairs, SceneSample};

const PARAM_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1;
const AUG_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_f: f64,
    pub lambda_o: f64,
    pub lambda_p: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Overrides `epochs` when nonzero.
    pub max_steps: usize,
    pub batch_size: usize,
    pub k_iters: usize,
    pub r_p: f64,
    pub r_n: f64,
    /// Augmentation bounds in radians and meters. Defaults are toy scale;
    /// full-size runs use π and 15.
    pub rot_range: f64,
    pub trans_range: f64,
    pub huber_delta: f64,
    /// Fraction of steps that use ground-truth overlap masks.
    pub warmup_fraction: f64,
    /// Add the pixel-anchored InfoNCE direction to `L_f`.
    pub pixel_direction: bool,
    pub alignment: AlignmentMode,
    /// Overlap heads on: BCE term and predicted masks.
    pub overlap: bool,
    pub pose_loss: bool,
    /// Weight PnP residuals by predicted point overlap scores.
    pub weighted_pnp: bool,
    /// Evaluate every this many steps (0 disables).
    pub eval_every: usize,
    pub eval_scenes: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub matching: MatchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_f: 1.0,
            lambda_o: 0.5,
            lambda_p: 0.2,
            lr: 1e-3,
            weight_decay: 1e-3,
            epochs: 10,
            max_steps: 0,
            batch_size: 1,
            k_iters: 5,
            r_p: 1.0,
            r_n: 4.0,
            rot_range: 0.1,
            trans_range: 0.5,
            huber_delta: 1.0,
            warmup_fraction: 0.1,
            pixel_direction: true,
            alignment: AlignmentMode::Learnable,
            overlap: true,
            pose_loss: true,
            weighted_pnp: false,
            eval_every: 0,
            eval_scenes: 8,
            seed: 0,
            encoder: EncoderConfig::default(),
            matching: MatchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_f", self.lambda_f),
            ("lambda_o", self.lambda_o),
            ("lambda_p", self.lambda_p),
            ("weight_decay", self.weight_decay),
            ("rot_range", self.rot_range),
            ("trans_range", self.trans_range),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.k_iters == 0 {
            return Err(Error::Config("batch_size and k_iters must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(Error::Config("either epochs or max_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        if !(0.0 < self.r_p && self.r_p < self.r_n) {
            return Err(Error::Config("pair margins need 0 < r_p < r_n".into()));
        }
        self.encoder.validate()?;
        self.matching.validate()
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            self.epochs * dataset_len.div_ceil(self.batch_size)
        }
    }
}

/// Raw loss terms of one scene; `total` is the λ-weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub l_f: f64,
    pub l_o: f64,
    pub l_p: f64,
    pub total: f64,
    /// The pose term was dropped because the solver failed.
    pub pose_dropped: bool,
    /// Predicted overlap was too small and ground truth was used.
    pub fallback: bool,
}

/// Contrastive pairs of one scene, independent of augmentation.
#[derive(Clone, Debug)]
pub struct ScenePairs {
    pub points: Vec<PointPairs>,
    pub pixels: Vec<PointPairs>,
}

impl ScenePairs {
    pub fn new(scene: &SceneSample, r_p: f64, r_n: f64) -> Result<Self> {
        let set = build_pairs(scene, r_p, r_n)?;
        let pixels = set.by_pixel(scene.num_pixels());
        let points = set.usable().cloned().collect();
        Ok(ScenePairs { points, pixels })
    }
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Tensor)]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for &(w, t) in terms {
        let s = tape.scale(t, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::Parameter("empty loss".into()))
}

/// Builds `λ_f L_f + λ_o L_o + λ_p L_p` for one augmented scene.
pub fn total_loss(
    tape: &mut Tape,
    params: &BoundParams,
    scene: &SceneSample,
    pairs: &ScenePairs,
    aug: &Augmentation,
    cfg: &TrainConfig,
    gt_masks: bool,
) -> Result<(Tensor, LossTerms)> {
    let points = apply_augmentation(&scene.points, aug);
    let gt_pose = recompute_gt_pose(&scene.raw_pose, aug);
    let input = EncoderInput::new(scene, points.clone());
    let tau = cfg.matching.tau;
    let f = forward(tape, params, &cfg.encoder, &input, cfg.alignment, tau)?;

    let mut l_f = matching::info_nce_points(tape, f.logits, &pairs.points)?;
    if cfg.pixel_direction {
        let li = matching::info_nce_pixels(tape, f.logits, &pairs.pixels)?;
        l_f = tape.add(l_f, li)?;
    }
    let mut terms = LossTerms {
        l_f: tape.scalar(l_f),
        ..LossTerms::default()
    };
    let mut weighted = vec![(cfg.lambda_f, l_f)];

    if cfg.overlap && cfg.lambda_o > 0.0 {
        let l_o = matching::overlap_bce_loss(
            tape,
            f.point_scores,
            f.pixel_scores,
            &scene.point_overlap,
            &scene.pixel_overlap,
        )?;
        terms.l_o = tape.scalar(l_o);
        weighted.push((cfg.lambda_o, l_o));
    }

    if cfg.pose_loss && cfg.lambda_p > 0.0 {
        let gt_points = scene.overlapping_points();
        let gt_pixels = scene.overlapping_pixels();
        let (sel_points, sel_pixels) = if !cfg.overlap {
            ((0..scene.num_points()).collect(), (0..scene.num_pixels()).collect())
        } else if gt_masks {
            (gt_points, gt_pixels)
        } else {
            let sp = tape.value(f.point_scores).data().to_vec();
            let si = tape.value(f.pixel_scores).data().to_vec();
            let sel = matching::threshold_overlap(
                &sp,
                &si,
                &cfg.matching,
                &gt_points,
                &gt_pixels,
                MIN_CORRESPONDENCES,
            );
            terms.fallback = sel.point_fallback || sel.pixel_fallback;
            (sel.points, sel.pixels)
        };
        let pose = (|| -> Result<Tensor> {
            let centers = scene.pixel_centers();
            let (_, coords) = matching::soft_match(
                tape,
                f.logits,
                &sel_points,
                &sel_pixels,
                &centers,
                &cfg.matching,
            )?;
            let weights = if cfg.weighted_pnp {
                Some(tape.gather_rows(f.point_scores, &sel_points)?)
            } else {
                None
            };
            let opts = RefineOptions {
                iters: cfg.k_iters,
                weights,
            };
            let pts = points.select_rows(&sel_points);
            let (est, _) = solve_pose(tape, &pts, coords, &scene.intrinsics, opts)?;
            let l = pose_loss(tape, est, &gt_pose, cfg.huber_delta)?;
            if !tape.value(l).is_finite() {
                return Err(Error::Solver("non-finite pose loss".into()));
            }
            Ok(l)
        })();
        match pose {
            Ok(l_p) => {
                terms.l_p = tape.scalar(l_p);
                weighted.push((cfg.lambda_p, l_p));
            }
            Err(_) => terms.pose_dropped = true,
        }
    }

    let total = weighted_sum(tape, &weighted)?;
    terms.total = tape.scalar(total);
    Ok((total, terms))
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Matrix],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Consistency(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Consistency(format!(
                    "gradient of {name} has shape {:?}, expected {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= lr * weight_decay * *x;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr_max · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let x = step.min(total_steps) as f64 / total_steps as f64;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_f: f64,
    pub l_o: f64,
    pub l_p: f64,
    pub total: f64,
    pub skipped: usize,
    pub pose_dropped: usize,
    pub fallback: usize,
    pub gt_masks: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_acc_5px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_mean_rte: Option<f64>,
}

impl StepRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub records: Vec<StepRecord>,
}

struct SceneResult {
    grads: Vec<Matrix>,
    terms: LossTerms,
}

fn scene_step(
    params: &ParamStore,
    scene: &SceneSample,
    pairs: &ScenePairs,
    aug: &Augmentation,
    cfg: &TrainConfig,
    gt_masks: bool,
) -> Result<SceneResult> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (loss, terms) = total_loss(&mut tape, &bound, scene, pairs, aug, cfg, gt_masks)?;
    if !terms.total.is_finite() {
        return Err(Error::Training("non-finite loss".into()));
    }
    let grads = tape.backward(loss)?;
    let grads = bound.gradients(&grads);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training("non-finite gradient".into()));
    }
    Ok(SceneResult { grads, terms })
}

/// Trains from `init` (or a fresh seeded model) and calls `on_step` with
/// each record as it is produced.
pub fn train(
    scenes: &[SceneSample],
    cfg: &TrainConfig,
    init: Option<ParamStore>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => init_model(&cfg.encoder, seed_for(cfg.seed, PARAM_STREAM)),
    };
    let pairs = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| ScenePairs::new(s, cfg.r_p, cfg.r_n).map_err(|e| e.in_scene(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(ORDER_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(AUG_STREAM);

    let total_steps = cfg.total_steps(scenes.len());
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    let mut opt = AdamW::new(&params);
    let mut records = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;

    for step in 0..total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(scenes.len()) {
            if cursor == order.len() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let augs = batch
            .iter()
            .map(|_| sample_augmentation(&mut aug_rng, cfg.rot_range, cfg.trans_range))
            .collect::<Result<Vec<_>>>()?;
        let gt_masks = step < warmup;
        let results: Vec<Result<SceneResult>> = batch
            .par_iter()
            .zip(&augs)
            .map(|(&i, aug)| scene_step(&params, &scenes[i], &pairs[i], aug, cfg, gt_masks))
            .collect();

        let ok: Vec<&SceneResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let failed = results.len() - ok.len();
        if failed * 2 > results.len() && results.len() > 1 {
            let (k, e) = results
                .iter()
                .enumerate()
                .find_map(|(k, r)| r.as_ref().err().map(|e| (k, e)))
                .expect("at least one failure");
            return Err(Error::Training(format!(
                "step {step}: {failed} of {} scenes failed; first: scene {}: {e}",
                results.len(),
                batch[k]
            )));
        }

        let lr = cosine_lr(step, total_steps, cfg.lr);
        let mut rec = StepRecord {
            step,
            lr,
            l_f: f64::NAN,
            l_o: f64::NAN,
            l_p: f64::NAN,
            total: f64::NAN,
            skipped: failed,
            pose_dropped: ok.iter().filter(|r| r.terms.pose_dropped).count(),
            fallback: ok.iter().filter(|r| r.terms.fallback).count(),
            gt_masks,
            eval_acc_5px: None,
            eval_mean_rte: None,
        };
        if !ok.is_empty() {
            let n = ok.len() as f64;
            let mut grads: Vec<Matrix> = ok[0].grads.clone();
            for r in &ok[1..] {
                for (g, h) in grads.iter_mut().zip(&r.grads) {
                    g.add_assign(h);
                }
            }
            if ok.len() > 1 {
                grads = grads.iter().map(|g| g.scale(1.0 / n)).collect();
            }
            opt.step(&mut params, &grads, lr, cfg.weight_decay)?;
            let mean = |f: fn(&LossTerms) -> f64| ok.iter().map(|r| f(&r.terms)).sum::<f64>() / n;
            rec.l_f = mean(|t| t.l_f);
            rec.l_o = mean(|t| t.l_o);
            rec.l_p = mean(|t| t.l_p);
            rec.total = mean(|t| t.total);
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let k = cfg.eval_scenes.clamp(1, scenes.len());
            let opts = EvalOptions {
                gn_iters: cfg.k_iters,
                ..EvalOptions::default()
            };
            let report = evaluate(&params, &cfg.encoder, &cfg.matching, &scenes[..k], &opts)?;
            rec.eval_acc_5px = report.matching.map(|m| m.accuracy);
            rec.eval_mean_rte = Some(report.mean_rte);
        }
        on_step(&rec);
        records.push(rec);
    }
    Ok(TrainOutcome { params, records })
}

/// Seed of an independent stream derived from the run seed.
pub fn seed_for(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
