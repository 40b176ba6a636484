//! Parameter layout and forward pass shared by training and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{self, EncoderConfig, EncoderInput, Features};
use crate::error::Result;
use crate::matching::{self, AlignmentMode};
use crate::params::{BoundParams, ParamStore};

/// Freshly initialized parameters for `cfg`, seeded.
pub fn init_model(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    encoder::init_params(&mut rng, cfg, &mut store);
    matching::init_params(&mut rng, cfg.channels, &mut store);
    store
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Fused features.
    pub feats: Features,
    /// Symmetric alignment matrix `W_f`.
    pub wf: Tensor,
    /// N×M τ-scaled logits in the requested alignment mode.
    pub logits: Tensor,
    pub point_scores: Tensor,
    pub pixel_scores: Tensor,
}

pub fn forward(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &EncoderConfig,
    input: &EncoderInput,
    mode: AlignmentMode,
    tau: f64,
) -> Result<Forward> {
    let f = encoder::encode(tape, params, cfg, input)?;
    let feats = encoder::fuse(tape, params, cfg, input, f)?;
    let wf = matching::alignment_matrix(tape, params.get("align.b"))?;
    let logits = matching::similarity(tape, feats.points, feats.pixels, Some(wf), mode, tau)?;
    let (point_scores, pixel_scores) = matching::overlap_scores(tape, params, feats)?;
    Ok(Forward {
        feats,
        wf,
        logits,
        point_scores,
        pixel_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn init_is_seeded_and_forward_shapes_hold() {
        let cfg = EncoderConfig {
            channels: 8,
            hidden: 8,
            ..EncoderConfig::default()
        };
        let a = init_model(&cfg, 3);
        assert_eq!(a, init_model(&cfg, 3));
        assert_ne!(a, init_model(&cfg, 4));
        assert_eq!(a.get("align.b").unwrap().shape(), (8, 8));

        let scfg = SceneConfig {
            n_points: 20,
            grid_height: 6,
            grid_width: 6,
            focal: 6.0,
            ..SceneConfig::default()
        };
        let s = generate_scene(&mut ChaCha8Rng::seed_from_u64(1), &scfg).unwrap();
        let mut tape = Tape::new();
        let p = a.bind(&mut tape);
        let input = EncoderInput::from_sample(&s);
        let f = forward(&mut tape, &p, &cfg, &input, AlignmentMode::Learnable, 0.07).unwrap();
        assert_eq!(f.logits.shape(), (20, 36));
        assert_eq!(f.point_scores.shape(), (20, 1));
        assert_eq!(f.pixel_scores.shape(), (36, 1));
    }
}
