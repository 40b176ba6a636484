//! Run configuration read from TOML.
//!
//! Parsing is strict: an unknown key anywhere is an error. Relative paths
//! are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Ablation, EvalOptions, RotationMetric};
use crate::gradcheck::probe_encoder;
use crate::encoder::EncoderConfig;
use crate::pnp::DEFAULT_GN_ITERS;
use crate::scene::SceneConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ablation: Ablation,
    pub use_overlap: bool,
    pub rotation_metric: RotationMetric,
    pub gn_iters: usize,
    /// Gaussian noise (px) added to matched targets before PnP.
    pub target_noise: f64,
    pub noise_seed: u64,
    /// Also write SVG recall curves.
    pub svg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let o = EvalOptions::default();
        EvalConfig {
            ablation: o.ablation,
            use_overlap: o.use_overlap,
            rotation_metric: o.rotation_metric,
            gn_iters: DEFAULT_GN_ITERS,
            target_noise: 0.0,
            noise_seed: 0,
            svg: false,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            ablation: self.ablation,
            use_overlap: self.use_overlap,
            target_noise: self.target_noise,
            noise_seed: self.noise_seed,
            gn_iters: self.gn_iters,
            rotation_metric: self.rotation_metric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Encoder widths for the gate; small so every weight can be probed.
    pub encoder: EncoderConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            encoder: probe_encoder(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Default output directory for commands that take `--out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Default dataset directory for `train` and `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.out_dir, &mut cfg.data_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.gradcheck.encoder.validate()?;
        if self.eval.gn_iters == 0 {
            return Err(Error::Config("eval.gn_iters must be positive".into()));
        }
        if !(self.eval.target_noise >= 0.0) {
            return Err(Error::Config("eval.target_noise must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_and_round_trips() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            "bogus = 1",
            "[train]\nlamda_f = 1.0",
            "[train.encoder]\nwidth = 3",
            "[scene]\npoints = 9",
            "[eval]\nablation = \"learnable-soft\"\nextra = true",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn nested_values_and_ablation_parse() {
        let cfg = RunConfig::from_toml(
            "[train]\nlambda_p = 0.0\nalignment = \"cosine\"\n[train.matching]\ntau = 0.1\n\
             [eval]\nablation = \"cosine-hard\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lambda_p, 0.0);
        assert_eq!(cfg.train.matching.tau, 0.1);
        assert_eq!(cfg.eval.ablation.name(), "cosine-hard");
        assert!(RunConfig::from_toml("[eval]\nablation = \"fancy\"").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = -1.0").is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("cfg");
        fs::create_dir(&sub).unwrap();
        let path = sub.join("run.toml");
        fs::write(&path, "out_dir = \"runs/a\"\ndata_dir = \"/abs/data\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.out_dir.unwrap(), sub.join("runs/a"));
        assert_eq!(cfg.data_dir.unwrap(), PathBuf::from("/abs/data"));
    }
}
