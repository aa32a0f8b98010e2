//! Command entry points: train, infer, eval, gradcheck, synth. The binary
//! in `main.rs` is a thin argument parser over these.

pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod train;

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::DataError;
use crate::loss::LossError;
use crate::model::{EncoderKind, ModelConfig, ModelError};
use crate::optim::SgdConfig;
use crate::tensor::ops::Reduction;
use crate::tensor::TensorError;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}; last good parameters saved to {checkpoint}")]
    NonFiniteLoss { step: usize, checkpoint: String },
}

/// Full run configuration: the model hyperparameters plus the optimizer
/// recipe and loss options. File keys and CLI flags mirror the field names.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_reduction: Reduction,
    pub iou_hw_scaling: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            lr_head: 3e-5,
            lr_backbone: 3e-6,
            momentum: 0.9,
            weight_decay: 5e-4,
            // desk-scale default; the reference recipe uses 16
            batch_size: 4,
            steps: 300,
            seed: 0,
            loss_reduction: Reduction::Mean,
            iou_hw_scaling: true,
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), message: message.into() }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| bad(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(bad(key, format!("expected a boolean, got `{other}`"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "input_size" => self.model.input_size = parse(key, value)?,
            "base_channels" => self.model.base_channels = parse(key, value)?,
            "encoder" => {
                self.model.encoder = match value.trim() {
                    "mini" => EncoderKind::Mini,
                    "resnet50-shape" => EncoderKind::Resnet50Shape,
                    other => return Err(bad(key, format!("unknown encoder `{other}`"))),
                }
            }
            "mini_stage_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 5 {
                    return Err(bad(key, "expected exactly 5 comma-separated counts"));
                }
                self.model.mini_stage_channels.copy_from_slice(&parts);
            }
            "use_adm" => self.model.use_adm = parse_bool(key, value)?,
            "use_uen" => self.model.use_uen = parse_bool(key, value)?,
            "adm_fc_reduction" => self.model.adm_fc_reduction = parse(key, value)?,
            "lr_head" => self.lr_head = parse(key, value)?,
            "lr_backbone" => self.lr_backbone = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss_reduction" => {
                self.loss_reduction = match value.trim() {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    other => return Err(bad(key, format!("unknown reduction `{other}`"))),
                }
            }
            "iou_hw_scaling" => self.iou_hw_scaling = parse_bool(key, value)?,
            other => return Err(bad(other, "unknown key")),
        }
        Ok(())
    }

    /// Load `key = value` lines; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| bad("config", format!("cannot read {}: {e}", path.display())))?;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("config", format!("expected key=value, got `{line}`")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        for (key, v) in [
            ("lr_head", self.lr_head),
            ("lr_backbone", self.lr_backbone),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(bad(key, format!("{v} must be finite and non-negative")));
            }
        }
        if self.lr_head <= 0.0 || self.lr_backbone <= 0.0 {
            return Err(bad("lr", "learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr_head: self.lr_head,
            lr_backbone: self.lr_backbone,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_options(&self) -> crate::loss::LossOptions {
        crate::loss::LossOptions {
            reduction: self.loss_reduction,
            iou_hw_scaling: self.iou_hw_scaling,
        }
    }
}
