use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nn::{Activation, LossKind};

use super::{GradMode, HyperParams, ModelSpec, TrainError};

/// Training configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_workers: usize,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "one")]
    pub inner_steps: usize,
    #[serde(default)]
    pub mode: GradMode,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub mlp_dims: Vec<usize>,
    pub iterations: usize,
    pub seed: u64,
    /// Record file, or a CSV that is preprocessed next to it on first use.
    pub data_path: PathBuf,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,

    #[serde(default = "half")]
    pub support_ratio: f64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub activation: Activation,
    /// Passes over each worker's range.
    #[serde(default = "one")]
    pub epochs: usize,
    /// Stop once the relative improvement of the windowed mean query loss
    /// falls below this; `null` disables early stopping.
    #[serde(default = "default_tol")]
    pub convergence_tol: Option<f64>,
    #[serde(default = "default_window")]
    pub convergence_window: usize,
    /// Clip each worker's outer gradient to global norm 10.
    #[serde(default)]
    pub clip_grad_norm: bool,
    /// Compare dense replicas against worker 0 after every iteration.
    #[serde(default)]
    pub check_replicas: bool,
}

fn one() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

fn default_tol() -> Option<f64> {
    Some(1e-4)
}

fn default_window() -> usize {
    50
}

pub const CLIP_NORM: f64 = 10.0;

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative paths are resolved against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data_path.is_relative() {
            cfg.data_path = base.join(&cfg.data_path);
        }
        if let Some(m) = cfg.metrics_path.as_mut() {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            alpha: self.alpha,
            beta: self.beta,
            inner_steps: self.inner_steps,
            mode: self.mode,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            embedding_dim: self.embedding_dim,
            mlp_dims: self.mlp_dims.clone(),
            activation: self.activation,
            loss: self.loss,
            clip_grad_norm: self.clip_grad_norm.then_some(CLIP_NORM),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_workers == 0 {
            return Err(TrainError::Config("n_workers must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.support_ratio) {
            return Err(TrainError::Config(
                "support_ratio must lie in [0, 1]".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.convergence_window == 0 {
            return Err(TrainError::Config(
                "convergence_window must be positive".into(),
            ));
        }
        self.hyper().validate()?;
        self.model_spec().validate()
    }
}
