//! Toy point and pixel encoders with a transformer-style fusion stack.
//!
//! Both branches are two-layer MLPs. Each fusion layer runs per-modality
//! self-attention on position-encoded features, bidirectional cross-attention
//! and a feed-forward block, with a residual around each. Single head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::{init_weight, BoundParams, ParamStore};
use crate::scene::SceneSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub hidden: usize,
    pub fusion_layers: usize,
    /// Metres per unit for point coordinates and texture fed to the MLPs.
    pub coord_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 32,
            hidden: 64,
            fusion_layers: 1,
            coord_scale: 10.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 6 || !self.channels.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "channels must be even and at least 6, got {}",
                self.channels
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Parameter("hidden width must be positive".into()));
        }
        if !(self.coord_scale.is_finite() && self.coord_scale > 0.0) {
            return Err(Error::Parameter("coord_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal position encoding of `coords` (M×d) into C channels.
///
/// Channel pair k encodes coordinate dimension `k % d` at frequency index
/// `k / d`; channel 2k holds the sine and 2k+1 the cosine.
pub fn sinusoidal_pe(coords: &Matrix, channels: usize) -> Result<Matrix> {
    let d = coords.cols();
    if !channels.is_multiple_of(2) || d == 0 || channels < 2 * d {
        return Err(Error::Parameter(format!(
            "position encoding needs an even channel count of at least {}, got {channels}",
            2 * d
        )));
    }
    let pairs = channels / 2;
    let freqs = pairs.div_ceil(d);
    let mut out = Matrix::zeros(coords.rows(), channels);
    for i in 0..coords.rows() {
        for k in 0..pairs {
            let f = (k / d) as f64;
            let omega = 10000f64.powf(-f / freqs as f64);
            let x = coords.get(i, k % d) * omega;
            out.set(i, 2 * k, x.sin());
            out.set(i, 2 * k + 1, x.cos());
        }
    }
    Ok(out)
}

/// Inputs of one forward pass, after any augmentation of the points.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    /// N×3 point coordinates in the (augmented) LiDAR frame.
    pub points: Matrix,
    /// M×2 pixel centers.
    pub pixel_coords: Matrix,
    pub texture: Vec<f64>,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl EncoderInput {
    pub fn new(sample: &SceneSample, points: Matrix) -> Self {
        EncoderInput {
            points,
            pixel_coords: sample.pixel_centers(),
            texture: sample.pixel_texture(),
            grid_height: sample.grid_height(),
            grid_width: sample.grid_width(),
        }
    }

    pub fn from_sample(sample: &SceneSample) -> Self {
        Self::new(sample, sample.points.clone())
    }

    pub fn num_points(&self) -> usize {
        self.points.rows()
    }

    pub fn num_pixels(&self) -> usize {
        self.pixel_coords.rows()
    }

    fn point_features(&self, scale: f64) -> Matrix {
        self.points.scale(1.0 / scale)
    }

    fn pixel_features(&self, scale: f64) -> Matrix {
        let sx = (self.grid_width.max(2) - 1) as f64;
        let sy = (self.grid_height.max(2) - 1) as f64;
        let mut m = Matrix::zeros(self.num_pixels(), 3);
        for j in 0..self.num_pixels() {
            m.set(j, 0, self.pixel_coords.get(j, 0) / sx);
            m.set(j, 1, self.pixel_coords.get(j, 1) / sy);
            m.set(j, 2, self.texture[j] / scale);
        }
        m
    }
}

/// Per-entity features on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub points: Tensor,
    pub pixels: Tensor,
}

const ATTN_BLOCKS: [&str; 4] = ["point.self", "pixel.self", "point.cross", "pixel.cross"];

/// Adds encoder and fusion parameters to `store`.
pub fn init_params<R: Rng + ?Sized>(rng: &mut R, cfg: &EncoderConfig, store: &mut ParamStore) {
    let (c, h) = (cfg.channels, cfg.hidden);
    for branch in ["point", "pixel"] {
        store.insert(format!("{branch}.w1"), init_weight(rng, 3, h));
        store.insert(format!("{branch}.b1"), Matrix::zeros(1, h));
        store.insert(format!("{branch}.w2"), init_weight(rng, h, c));
        store.insert(format!("{branch}.b2"), Matrix::zeros(1, c));
    }
    for l in 0..cfg.fusion_layers {
        for block in ATTN_BLOCKS {
            for proj in ["q", "k", "v", "o"] {
                store.insert(format!("fuse{l}.{block}.{proj}"), init_weight(rng, c, c));
            }
        }
        for m in ["point", "pixel"] {
            store.insert(format!("fuse{l}.{m}.ff.w1"), init_weight(rng, c, h));
            store.insert(format!("fuse{l}.{m}.ff.b1"), Matrix::zeros(1, h));
            store.insert(format!("fuse{l}.{m}.ff.w2"), init_weight(rng, h, c));
            store.insert(format!("fuse{l}.{m}.ff.b2"), Matrix::zeros(1, c));
        }
    }
}

/// `x W + 1 bᵀ`.
pub fn affine(tape: &mut Tape, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
    let xw = tape.matmul(x, w)?;
    let bias = tape.repeat_rows(b, x.rows())?;
    tape.add(xw, bias)
}

fn mlp(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Tensor) -> Result<Tensor> {
    let h = affine(
        tape,
        x,
        p.get(&format!("{prefix}.w1")),
        p.get(&format!("{prefix}.b1")),
    )?;
    let h = tape.tanh(h);
    affine(
        tape,
        h,
        p.get(&format!("{prefix}.w2")),
        p.get(&format!("{prefix}.b2")),
    )
}

/// Runs the two encoder branches. Outputs exclude position encoding.
pub fn encode(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &EncoderConfig,
    input: &EncoderInput,
) -> Result<Features> {
    let xp = tape.constant(input.point_features(cfg.coord_scale));
    let xi = tape.constant(input.pixel_features(cfg.coord_scale));
    Ok(Features {
        points: mlp(tape, params, "point", xp)?,
        pixels: mlp(tape, params, "pixel", xi)?,
    })
}

/// Single-head attention. Returns the projected output and the N_q×N_kv
/// attention weights.
pub fn attention(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    query: Tensor,
    context: Tensor,
) -> Result<(Tensor, Tensor)> {
    let q = tape.matmul(query, params.get(&format!("{prefix}.q")))?;
    let k = tape.matmul(context, params.get(&format!("{prefix}.k")))?;
    let v = tape.matmul(context, params.get(&format!("{prefix}.v")))?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (q.cols() as f64).sqrt());
    let weights = tape.softmax_rows(scores)?;
    let mixed = tape.matmul(weights, v)?;
    let out = tape.matmul(mixed, params.get(&format!("{prefix}.o")))?;
    Ok((out, weights))
}

/// Applies every fusion layer. Position encodings are added to the inputs of
/// both attention stages.
pub fn fuse(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &EncoderConfig,
    input: &EncoderInput,
    feats: Features,
) -> Result<Features> {
    let c = cfg.channels;
    let pe_p = tape.constant(sinusoidal_pe(&input.points, c)?);
    let pe_i = tape.constant(sinusoidal_pe(&input.pixel_coords, c)?);
    let (mut fp, mut fi) = (feats.points, feats.pixels);
    for l in 0..cfg.fusion_layers {
        let name = |s: &str| format!("fuse{l}.{s}");

        let hp = tape.add(fp, pe_p)?;
        let (ap, _) = attention(tape, params, &name("point.self"), hp, hp)?;
        fp = tape.add(fp, ap)?;
        let hi = tape.add(fi, pe_i)?;
        let (ai, _) = attention(tape, params, &name("pixel.self"), hi, hi)?;
        fi = tape.add(fi, ai)?;

        let hp = tape.add(fp, pe_p)?;
        let hi = tape.add(fi, pe_i)?;
        let (cp, _) = attention(tape, params, &name("point.cross"), hp, hi)?;
        let (ci, _) = attention(tape, params, &name("pixel.cross"), hi, hp)?;
        fp = tape.add(fp, cp)?;
        fi = tape.add(fi, ci)?;

        let ffp = mlp(tape, params, &name("point.ff"), fp)?;
        fp = tape.add(fp, ffp)?;
        let ffi = mlp(tape, params, &name("pixel.ff"), fi)?;
        fi = tape.add(fi, ffi)?;
    }
    Ok(Features {
        points: fp,
        pixels: fi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check_on;
    use crate::scene::{generate_scene, SceneConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: 8,
            hidden: 6,
            ..EncoderConfig::default()
        }
    }

    fn scene(n: usize, grid: usize, seed: u64) -> SceneSample {
        let cfg = SceneConfig {
            n_points: n,
            grid_height: grid,
            grid_width: grid,
            focal: grid as f64,
            ..SceneConfig::default()
        };
        generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap()
    }

    fn store(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut ChaCha8Rng::seed_from_u64(seed), cfg, &mut s);
        s
    }

    #[test]
    fn pe_at_zero_and_bounds() {
        let pe = sinusoidal_pe(&Matrix::zeros(1, 3), 12).unwrap();
        for k in 0..6 {
            assert_eq!(pe.get(0, 2 * k), 0.0);
            assert_eq!(pe.get(0, 2 * k + 1), 1.0);
        }
        let coords = Matrix::from_rows(&[[1e3, -7.5, 3.25], [0.1, 42.0, -1e4]]);
        let pe = sinusoidal_pe(&coords, 32).unwrap();
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(matches!(sinusoidal_pe(&coords, 7), Err(Error::Parameter(_))));
        assert!(sinusoidal_pe(&coords, 4).is_err());
    }

    #[test]
    fn pe_rows_distinct_on_grid() {
        let pe = sinusoidal_pe(&crate::scene::pixel_centers(8, 8), 32).unwrap();
        for a in 0..64 {
            for b in a + 1..64 {
                let d: f64 = pe
                    .row(a)
                    .iter()
                    .zip(pe.row(b))
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(d > 1e-6, "rows {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn shapes_and_zero_weights() {
        let cfg = small_cfg();
        let s = scene(16, 6, 1);
        let mut st = store(&cfg, 2);
        for v in st.values_mut() {
            *v = v.map(|_| 0.0);
        }
        let mut b2 = Matrix::zeros(1, cfg.channels);
        b2.set(0, 3, 0.25);
        st.insert("point.b2", b2);
        let input = EncoderInput::from_sample(&s);
        let mut tape = Tape::new();
        let p = st.bind(&mut tape);
        let f = encode(&mut tape, &p, &cfg, &input).unwrap();
        assert_eq!(f.points.shape(), (16, 8));
        assert_eq!(f.pixels.shape(), (36, 8));
        let fp = tape.value(f.points).clone();
        for i in 0..16 {
            for c in 0..8 {
                assert_eq!(fp.get(i, c), if c == 3 { 0.25 } else { 0.0 });
            }
        }
        assert!(tape.value(f.pixels).data().iter().all(|&v| v == 0.0));

        // Zero attention and feed-forward weights leave features unchanged.
        let fused = fuse(&mut tape, &p, &cfg, &input, f).unwrap();
        assert_eq!(tape.value(fused.points), &fp);
        assert_eq!(fused.pixels.shape(), (36, 8));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let s = scene(16, 6, 3);
        let st = store(&cfg, 4);
        let input = EncoderInput::from_sample(&s);
        let mut tape = Tape::new();
        let p = st.bind(&mut tape);
        let f = encode(&mut tape, &p, &cfg, &input).unwrap();
        let (_, w) = attention(&mut tape, &p, "fuse0.point.cross", f.points, f.pixels).unwrap();
        let w = tape.value(w);
        assert_eq!(w.shape(), (16, 36));
        for i in 0..16 {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_permutation_permutes_features() {
        let cfg = small_cfg();
        let s = scene(16, 6, 5);
        let st = store(&cfg, 6);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(7));

        let run = |points: Matrix| {
            let input = EncoderInput::new(&s, points);
            let mut tape = Tape::new();
            let p = st.bind(&mut tape);
            let f = encode(&mut tape, &p, &cfg, &input).unwrap();
            let f = fuse(&mut tape, &p, &cfg, &input, f).unwrap();
            (tape.value(f.points).clone(), tape.value(f.pixels).clone())
        };
        let (fp, fi) = run(s.points.clone());
        let (gp, gi) = run(s.points.select_rows(&perm));
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..cfg.channels {
                let (a, b) = (gp.get(new, c), fp.get(old, c));
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
        // Key order only changes summation order in the pixel branch.
        for (a, b) in gi.data().iter().zip(fi.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn encode_and_fuse_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            channels: 6,
            hidden: 4,
            ..EncoderConfig::default()
        };
        let s = scene(8, 4, 8);
        let st = store(&cfg, 9);
        let input = EncoderInput::from_sample(&s);
        let names = st.names().to_vec();
        let probe = Matrix::from_vec(
            8,
            6,
            (0..48).map(|i| 0.3 + ((i * 37 % 11) as f64) / 7.0).collect(),
        )
        .unwrap();
        let report = finite_difference_check_on(
            Tape::new,
            |tape, ts| {
                let p = BoundParams::from_parts(&names, ts);
                let f = encode(tape, &p, &cfg, &input)?;
                let f = fuse(tape, &p, &cfg, &input, f)?;
                let w = tape.constant(probe.clone());
                let m = tape.mul(f.points, w)?;
                let a = tape.sum(m)?;
                let sq = tape.mul(f.pixels, f.pixels)?;
                let b = tape.mean(sq)?;
                tape.add(a, b)
            },
            st.values(),
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
