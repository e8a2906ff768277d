//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! manifest = "data/manifest.json"   # or a [data.synthetic] table
//! normalize = true
//!
//! [model]
//! latent_dim = 32
//!
//! [fusion]
//! kind = "gated"
//!
//! [aug]
//! kind = "com"
//! level = "feature"
//!
//! [train]
//! max_epochs = 50
//!
//! [eval]
//! folds = 5
//! scenarios = ["none", "only_missing", "fraction"]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::AugPolicy;
use crate::data::{generate_synthetic, load_dataset, MultiViewDataset, SyntheticConfig};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, RunConfig};
use crate::fusion::FusionConfig;
use crate::model::Level;
use crate::rng::stream_seed;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticConfig::default(),
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub fusion: FusionConfig,
    pub aug: AugPolicy,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`; a relative manifest path resolves
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.aug.level == Level::Feature {
            self.fusion.validate(self.model.latent_dim)?;
        }
        self.aug.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.manifest.is_none() {
            self.data.synthetic.validate()?;
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            encoder: self.model.clone(),
            fusion: self.fusion.clone(),
            aug: self.aug.clone(),
            train: self.train.clone(),
            normalize: self.data.normalize,
        }
    }

    /// The configured dataset: loaded from the manifest, or generated from
    /// the `data` stream of the seed.
    pub fn dataset(&self) -> Result<MultiViewDataset> {
        match &self.data.manifest {
            Some(path) => load_dataset(path),
            None => generate_synthetic(&self.data.synthetic, stream_seed(self.seed, "data")),
        }
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::AugKind;

    #[test]
    fn defaults_and_overrides() {
        let cfg =
            ExperimentConfig::from_toml("seed = 3\n[aug]\nkind = \"com\"\n[fusion]\nkind = \"memory\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.aug.kind, AugKind::Com);
        assert_eq!(cfg.fusion.layer_count(), 2);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.model.latent_dim, 128);
        assert_eq!(cfg.eval.folds, 5);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\npatience = 0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("[fusion]\nkind = \"magic\"\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("[model]\nunknown = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("[fusion]\nkind = \"cross\"\nheads = 3\n").is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_value(cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
