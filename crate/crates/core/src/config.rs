//! Pipeline configuration file (TOML).
//!
//! ```toml
//! [basegen]
//! noise_sigma = 0.05
//! colormap = "viridis"
//!
//! [train]
//! iterations = 2000
//! batch_size = 4
//!
//! [paths]
//! manifest = "data/depth/manifest.json"
//! ```
//!
//! Every section is optional; missing fields take their defaults. Output
//! directories are given on the command line, never in the file, so a
//! `config.lock` reproduces a run wherever it is written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basegen::{AugmentConfig, BaseGenConfig};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::featurenet::BackendConfig;
use crate::losses::LossConfig;
use crate::stylebank::NetConfig;
use crate::trainer::{TrainConfig, TrainSettings};

pub const SEED_ENV: &str = "SONARSYNTH_SEED";
pub const LOCK_FILE: &str = "config.lock";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Input manifest (depth frames for `basegen` and `pipeline`, base
    /// images for the other commands).
    pub manifest: Option<PathBuf>,
    /// Trained network for `stylize`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `random` draws `pairs` pairs across the two sets; `aligned` pairs
    /// the i-th images of equally sized sets.
    pub pairing: String,
    pub pairs: usize,
    pub seed: u64,
    /// IOU threshold for `eval-detect`.
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairing: "random".into(),
            pairs: 64,
            seed: 0,
            iou_threshold: crate::detecteval::IOU_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Augmented copies per stylized image (each yields a polarity pair).
    pub copies: usize,
    /// Styles to render; empty renders every style.
    pub style_ids: Vec<usize>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            copies: 1,
            style_ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub basegen: BaseGenConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub network: NetConfig,
    pub backend: BackendConfig,
    pub eval: EvalConfig,
    pub pipeline: PipelineSection,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.basegen.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.network.validate()?;
        if !matches!(self.eval.pairing.as_str(), "random" | "aligned") {
            return Err(Error::Config(format!(
                "eval.pairing must be \"random\" or \"aligned\", got {:?}",
                self.eval.pairing
            )));
        }
        if self.eval.pairs == 0 {
            return Err(Error::Config("eval.pairs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(Error::Config(format!(
                "eval.iou_threshold must lie in [0, 1], got {}",
                self.eval.iou_threshold
            )));
        }
        for (field, seed) in [
            ("basegen.rng_seed", self.basegen.rng_seed),
            ("augment.rng_seed", self.augment.rng_seed),
            ("train.seed", self.train.seed),
            ("backend.seed", self.backend.seed),
            ("eval.seed", self.eval.seed),
        ] {
            if seed > i64::MAX as u64 {
                return Err(Error::Config(format!("{field} must be <= {}", i64::MAX)));
            }
        }
        Ok(())
    }

    /// Sets every run seed (base-image noise, augmentation, training,
    /// evaluation sampling). The feature backend keeps its own seed since it
    /// identifies a fixed network rather than a source of run randomness.
    pub fn set_seed(&mut self, seed: u64) {
        self.basegen.rng_seed = seed;
        self.augment.rng_seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    /// Applies `SONARSYNTH_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV} must be an integer seed, got {v:?}")))?;
                self.set_seed(seed);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            train: self.train.clone(),
            loss: self.loss.clone(),
            network: self.network,
        }
    }

    /// Writes the resolved config to `out_dir/config.lock`.
    pub fn write_lock(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(LOCK_FILE);
        write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }
}
