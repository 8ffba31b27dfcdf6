//! Declarative run configuration: one TOML document covering the network,
//! training, inference window and phantom recipe. Unknown keys are rejected
//! so typos fail loudly, and every run persists its resolved config next to
//! the outputs for exact reproduction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::SlidingWindowConfig;
use crate::network::NetworkConfig;
use crate::phantom::PhantomSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub window: SlidingWindowConfig,
    pub phantom: PhantomSpec,
    /// Measure surface distances in millimetres instead of voxels.
    pub spacing_aware: bool,
    /// Keep only this fraction of the labelled cases at train time, moving
    /// the rest into the unlabeled pool.
    pub labeled_ratio: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        // Phantom-scale costs: volume-sized windows and a smaller negative
        // bank than the 400 used on real data.
        let mut train = TrainConfig::default();
        train.contrastive.negatives = 100;
        let window = SlidingWindowConfig { patch_size: train.patch_size, overlap: 0.5 };
        RunConfig {
            network: NetworkConfig::default(),
            train,
            window,
            phantom: PhantomSpec::default(),
            spacing_aware: false,
            labeled_ratio: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.window.validate()?;
        self.phantom.validate()?;
        if self.phantom.num_classes != self.network.num_classes {
            return Err(Error::Config(format!(
                "phantom classes ({}) disagree with network classes ({})",
                self.phantom.num_classes, self.network.num_classes
            )));
        }
        if let Some(r) = self.labeled_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("labeled_ratio must lie in (0,1], got {r}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
