//! Hybrid-parallel meta-learning for recommendation models.
//!
//! The embedding table is row-sharded across simulated workers (model
//! parallelism) while the dense head is replicated (data parallelism).
//! Lookups and embedding gradients travel by all-to-all, dense gradients by
//! ring all-reduce. A task-aware record pipeline feeds each worker batches
//! that contain a single task.

pub mod autodiff;
pub mod bench;
pub mod collectives;
pub mod datagen;
pub mod embedding;
pub mod metaio;
pub mod nn;
pub mod tensor;
pub mod trainer;
