use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::dataset::DEFAULT_CROP;
use crate::error::{QenetError, Result};
use crate::flownet::FlowNetConfig;
use crate::pipeline::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Single-frame enhancer on every decoded frame.
    Sf,
    /// Multi-frame enhancer and flow net; the single-frame enhancer is frozen.
    Mf,
}

impl Stage {
    /// Whether the named model parameter is optimized in this stage.
    pub fn trains(&self, param: &str) -> bool {
        match self {
            Stage::Sf => param.starts_with("sf."),
            Stage::Mf => param.starts_with("mf.") || param.starts_with("flow."),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sf => "sf",
            Stage::Mf => "mf",
        })
    }
}

impl FromStr for Stage {
    type Err = QenetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sf" => Ok(Stage::Sf),
            "mf" => Ok(Stage::Mf),
            other => Err(QenetError::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

/// The quantization parameters the models are trained for.
pub const SUPPORTED_QPS: [u8; 2] = [32, 37];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub qp: u8,
    pub lr0: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub sequences_per_step: usize,
    /// Square crop side; 0 trains on whole frames.
    pub crop: usize,
    pub epochs: u64,
    /// Caps the optimizer steps per epoch; 0 means one full pass over the index.
    pub steps_per_epoch: u64,
    pub seed: u64,
    pub enhancer_width: usize,
    pub resblocks: usize,
    pub flow_base: usize,
    /// When a multi-frame stage starts from single-frame weights, copy the
    /// single-frame enhancer into the multi-frame one (extra inputs zeroed).
    pub mf_from_sf: bool,
    pub data_root: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::small();
        let adam = AdamConfig::default();
        TrainConfig {
            stage: Stage::Mf,
            qp: 32,
            lr0: 1e-4,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            sequences_per_step: 1,
            crop: DEFAULT_CROP,
            epochs: 40,
            steps_per_epoch: 0,
            seed: 0,
            enhancer_width: model.enhancer_width,
            resblocks: model.resblocks,
            flow_base: model.flow.base,
            mf_from_sf: false,
            data_root: None,
            index: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

impl TrainConfig {
    /// `lr0 · factor^⌊epoch / every⌋`, with `epoch` counted from 0.
    pub fn lr_at(&self, epoch: u64) -> f64 {
        let decays = epoch.checked_div(self.lr_decay_every).unwrap_or(0);
        self.lr0 * self.lr_decay_factor.powi(decays.min(i32::MAX as u64) as i32)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { enhancer_width: self.enhancer_width, resblocks: self.resblocks, flow: FlowNetConfig::reduced(self.flow_base) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(QenetError::InvalidArgument(m.to_string()));
        if !SUPPORTED_QPS.contains(&self.qp) {
            return bad(&format!("qp must be one of {SUPPORTED_QPS:?}, got {}", self.qp));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.lr_decay_factor) {
            return bad("lr_decay_factor must lie in [0, 1]");
        }
        if self.sequences_per_step == 0 {
            return bad("sequences_per_step must be at least 1");
        }
        if !self.crop.is_multiple_of(4) {
            return bad("crop must be a multiple of 4");
        }
        if self.enhancer_width == 0 || self.flow_base == 0 || self.resblocks == 0 {
            return bad("model widths must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("adam hyperparameters out of range");
        }
        Ok(())
    }
}
