//! Run configuration: one strict JSON document with a section per module.
//! Every field is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::bottleneck::BottleneckConfig;
use crate::data::LogicShapesSpec;
use crate::error::{config_err, GlcfError, Result};
use crate::eval::SproConfig;
use crate::heads::DecoderConfig;
use crate::model::ModelConfig;
use crate::scoring::FusionConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Side length images are resized to before entering the backbone.
    pub resolution: usize,
    /// Dataset folder. When absent, LogicShapes is generated from `logicshapes`
    /// into the dataset cache.
    pub path: Option<PathBuf>,
    pub logicshapes: LogicShapesSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            path: None,
            logicshapes: LogicShapesSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub spro: SproConfig,
    /// Images per forward pass when scoring.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            spro: SproConfig::default(),
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub bottleneck: BottleneckConfig,
    pub heads: DecoderConfig,
    pub training: TrainingConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlcfError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            GlcfError::Config(m) => config_err(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            bottleneck: self.bottleneck.clone(),
            heads: self.heads.clone(),
            resolution: self.data.resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.bottleneck.validate()?;
        self.training.validate()?;
        self.fusion.validate()?;
        self.backbone
            .level_shapes(self.data.resolution, self.data.resolution)?;
        if self.eval.batch_size == 0 {
            return Err(config_err("eval.batch_size must be positive"));
        }
        let s = &self.eval.spro;
        if !(s.fpr_limit > 0.0 && s.fpr_limit <= 1.0) {
            return Err(config_err("eval.spro.fpr_limit must be in (0, 1]"));
        }
        if !(s.saturation_fraction > 0.0 && s.saturation_fraction <= 1.0) {
            return Err(config_err("eval.spro.saturation_fraction must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
