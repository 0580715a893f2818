//! The aggregated run configuration.
//!
//! A config file only names what it changes: the file is overlaid key by key on
//! the serialized defaults, and the merged tree is then parsed strictly, so an
//! unknown key anywhere is an error rather than a silent no-op.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::hydro::HydroConfig;
use crate::models::{ArchConfig, SegFormerTinyConfig, UNetTinyConfig};
use crate::raster::Normalization;
use crate::synth::SynthConfig;
use crate::train::{LossConfig, OptimConfig, TrainSettings};

/// Optimizer schedule and loop settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub optim: OptimConfig,
    pub train: TrainSettings,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { optim: OptimConfig::default(), train: TrainSettings::default() }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.train.iters > self.optim.total_iters {
            return Err(Error::Config(format!(
                "iters {} exceeds total_iters {}",
                self.train.iters, self.optim.total_iters
            )));
        }
        if !(0.0..=1.0).contains(&self.train.threshold) {
            return Err(Error::Config(format!("threshold {} not in [0,1]", self.train.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub segformer: SegFormerTinyConfig,
    pub unet: UNetTinyConfig,
}

impl ModelsConfig {
    pub fn segformer_arch(&self) -> ArchConfig {
        ArchConfig::Segformer(self.segformer.clone())
    }

    pub fn unet_arch(&self) -> ArchConfig {
        ArchConfig::Unet(self.unet.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Output directory used when `--out` is not given.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub models: ModelsConfig,
    pub normalization: Normalization,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub scratch: StageConfig,
    pub hydro: HydroConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let augment = AugmentConfig { out_size: synth.tile.window, ..AugmentConfig::default() };
        Self {
            seed: 42,
            threads: 1,
            synth,
            augment,
            loss: LossConfig::default(),
            models: ModelsConfig::default(),
            normalization: Normalization::default(),
            pretrain: StageConfig::default(),
            finetune: StageConfig::default(),
            scratch: StageConfig::default(),
            hydro: HydroConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let overlay = serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_overlay(overlay)
    }

    /// Defaults overlaid with a JSON document, such as a resolved snapshot.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_overlay(overlay)
    }

    fn from_overlay(overlay: Value) -> Result<Self> {
        if !overlay.is_object() {
            return Err(Error::Config("config root must be a table".into()));
        }
        let mut tree = serde_json::to_value(Self::default()).expect("defaults serialize");
        merge(&mut tree, overlay);
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `.json` files as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.models.segformer_arch().validate()?;
        self.models.unet_arch().validate()?;
        self.normalization.validate()?;
        self.hydro.validate()?;
        for (name, stage) in [("pretrain", &self.pretrain), ("finetune", &self.finetune), ("scratch", &self.scratch)] {
            stage.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        let window = self.synth.tile.window;
        for arch in [self.models.segformer_arch(), self.models.unet_arch()] {
            if window % arch.size_multiple() != 0 {
                return Err(Error::Config(format!(
                    "tile window {window} is not a multiple of {} required by {}",
                    arch.size_multiple(),
                    arch.name()
                )));
            }
        }
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Finetune => &self.finetune,
            Stage::Scratch => &self.scratch,
        }
    }

    /// The fully resolved configuration as pretty JSON; loading it reproduces `self`.
    pub fn snapshot(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Scratch,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Scratch => "scratch",
        }
    }
}
