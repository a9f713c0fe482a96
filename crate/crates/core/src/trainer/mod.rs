//! Hybrid-parallel MAML.
//!
//! Each worker owns one row shard of the embedding table and a full replica
//! of the dense parameters. Per iteration a worker:
//!
//! 1. prefetches the rows for the union of its support and query ids with a
//!    single request/response all-to-all round trip,
//! 2. adapts rows and dense parameters on the support set (inner step),
//! 3. builds the query view: rows touched by the support set take their
//!    adapted value, query-only rows keep the prefetched value,
//! 4. differentiates the query loss with respect to the meta parameters and
//!    ships embedding gradients to their owners (all-to-all) and sums dense
//!    gradients over workers (ring all-reduce).
//!
//! [`serial_reference`] performs the same meta update for `N` task batches
//! in one context with an unsharded table and no collectives.

mod config;
mod engine;
mod serial;
mod step;
mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::CollectiveError;
use crate::embedding::EmbeddingError;
use crate::metaio::MetaIoError;
use crate::tensor::TensorError;

pub use crate::metaio::TaskBatch;
pub use config::TrainConfig;
pub use engine::{
    initial_dense, iteration_budget, resolve_data, train_loop, train_with_hook, BatchStream,
    IterationRecord, StopReason, TrainOutcome,
};
pub use serial::{adapted_query_loss, serial_reference, SerialModel};
pub use step::{
    inner_step, meta_gradient, meta_iteration, outer_step, overlap_update, prefetch_embeddings,
    prefetch_local, task_meta_gradient, union_ids, InnerOutput, IterationOutput, MetaModel,
    PrefetchResult, TaskGradient,
};
pub use verify::{verify, VerifyReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    MetaIo(#[from] MetaIoError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("routing fault: {0}")]
    Routing(String),
    #[error("feature id {0} was not prefetched")]
    MissingPrefetch(u64),
    #[error("non-finite {what} gradient on worker {worker}; iteration aborted")]
    NonFinite { worker: usize, what: &'static str },
    #[error("dense replica on worker {worker} diverged from root by {max_diff:e}")]
    ReplicaDivergence { worker: usize, max_diff: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Faults caused by another worker going away rather than a local error.
    pub fn is_secondary(&self) -> bool {
        matches!(
            self,
            TrainError::Collective(CollectiveError::PeerGone { .. })
                | TrainError::Collective(CollectiveError::Timeout { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Differentiate through the inner update.
    #[default]
    FullSecondOrder,
    /// Treat the inner gradient as a constant.
    FirstOrder,
}

impl std::str::FromStr for GradMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_second_order" | "full" | "second_order" => Ok(GradMode::FullSecondOrder),
            "first_order" | "first" | "fo" => Ok(GradMode::FirstOrder),
            other => Err(format!("unknown gradient mode {other:?}")),
        }
    }
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradMode::FullSecondOrder => "full_second_order",
            GradMode::FirstOrder => "first_order",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub mode: GradMode,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.05,
            inner_steps: 1,
            mode: GradMode::FullSecondOrder,
        }
    }
}

impl HyperParams {
    /// Zero step sizes are accepted; they are the degenerate cases used in
    /// tests. Negative or non-finite ones are not.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TrainError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(TrainError::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.inner_steps == 0 {
            return Err(TrainError::Config("inner_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Shape and loss of the recommender head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub embedding_dim: usize,
    /// Layer widths, starting with `embedding_dim + dense_width`.
    pub mlp_dims: Vec<usize>,
    pub activation: crate::nn::Activation,
    pub loss: crate::nn::LossKind,
    /// Per-worker global-norm clip of the outer gradient.
    pub clip_grad_norm: Option<f64>,
}

impl ModelSpec {
    pub fn dense_width(&self) -> usize {
        self.mlp_dims
            .first()
            .map_or(0, |d| d.saturating_sub(self.embedding_dim))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.embedding_dim == 0 {
            return Err(TrainError::Config("embedding_dim must be positive".into()));
        }
        if self.mlp_dims.len() < 2 || self.mlp_dims.contains(&0) {
            return Err(TrainError::Config(format!(
                "mlp_dims needs at least two positive widths, got {:?}",
                self.mlp_dims
            )));
        }
        if self.mlp_dims[0] < self.embedding_dim {
            return Err(TrainError::Config(format!(
                "first mlp width {} is smaller than embedding_dim {}",
                self.mlp_dims[0], self.embedding_dim
            )));
        }
        if *self.mlp_dims.last().unwrap() != 1 {
            return Err(TrainError::Config("last mlp width must be 1".into()));
        }
        Ok(())
    }
}

/// Seeds for the embedding table and the dense head, derived from one seed.
pub fn embedding_seed(seed: u64) -> u64 {
    seed
}

pub fn dense_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}
