//! Run configuration: a versioned JSON file whose sections default
//! independently, overridden by command-line flags.
//!
//! ```json
//! {
//!   "version": 1,
//!   "seed": 0,
//!   "synth": { "family": "geometric-shapes", "d_x": 2048, "noise_sigma": 0.1,
//!              "image_size": 100, "n_train": 1200, "n_test": 50 },
//!   "arch":  { "d_z": 64, "conv_channels": [32, 64, 128] },
//!   "train": { "lr": 3e-4, "epochs": [10, 10, 10], "ablation": "full" },
//!   "eval":  { "metrics": ["pcc", "ssim"] }
//! }
//! ```
//!
//! `arch.d_x`, `arch.image_channels` and `arch.image_size` always follow the
//! dataset being trained on. A top-level `seed` (or `--seed`) replaces
//! `train.seed` and also seeds synthesis and the Pix-Com/rating distractors.

use std::path::Path;

use dvaegan_core::data::SynthParams;
use dvaegan_core::eval::metrics;
use dvaegan_core::model::Arch;
use dvaegan_core::train::TrainConfig;
use dvaegan_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "DVAEGAN_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metrics: vec!["pcc".into(), "ssim".into()] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: SynthParams,
    #[serde(default)]
    pub arch: Arch,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            synth: SynthParams::default(),
            arch: Arch::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version)));
        }
        Ok(cfg)
    }

    /// Defaults, then the file at `path`, then `seed`.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let reg = metrics();
        for m in &self.eval.metrics {
            reg.get(m)?;
        }
        if self.eval.metrics.is_empty() {
            return Err(Error::Config("eval.metrics is empty".into()));
        }
        Ok(())
    }
}

/// Worker threads: `DVAEGAN_THREADS` if set, else the available cores.
pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_default_independently() {
        let c = RunConfig::parse(r#"{"version": 1, "train": {"lr": 0.001}, "synth": {"n_train": 10}}"#).unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.synth.n_train, 10);
        assert_eq!(c.synth.d_x, 2048);
        assert_eq!(c.arch, Arch::default());
    }

    #[test]
    fn unknown_keys_and_versions_are_config_errors() {
        for bad in [r#"{"version": 1, "trian": {}}"#, r#"{"version": 1, "train": {"learning_rate": 1}}"#, r#"{"version": 2}"#, "{"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn seed_flag_wins() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"version": 1, "seed": 4, "train": {"seed": 9}}"#).unwrap();
        assert_eq!(RunConfig::load(Some(&p), None).unwrap().train.seed, 4);
        assert_eq!(RunConfig::load(Some(&p), Some(7)).unwrap().seed(), 7);
        assert_eq!(RunConfig::load(None, None).unwrap().seed(), 0);
    }

    #[test]
    fn unknown_metric_fails_validation() {
        let c = RunConfig { eval: EvalConfig { metrics: vec!["psnr".into()] }, ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
