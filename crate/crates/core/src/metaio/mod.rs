//! Task-aware data ingestion.
//!
//! Offline, [`preprocess`] sorts samples by task, cuts each task into
//! batches of at most `batch_size` samples, shuffles whole batches and writes
//! them to an offset-indexed binary [`RecordFile`]. Online, each worker reads
//! its contiguous slice of batches sequentially ([`load_worker_range`]),
//! [`group_batch`] reassembles task-uniform batches and
//! [`split_support_query`] turns each into a support/query pair.

mod csv_io;
mod format;
mod loader;
mod preprocess;

use std::io;

use thiserror::Error;

pub use csv_io::{read_csv, write_csv};
pub use format::{Header, IndexEntry, RecordFile, HEADER_LEN, MAGIC, VERSION};
pub use loader::{
    group_batch, load_worker_range, split_support_query, worker_batch_range, GroupBatch,
    GroupBatches, RangeReader, Splitter,
};
pub use preprocess::{assign_batches, preprocess, shuffle_batches, Batch, Preprocessed};

#[derive(Debug, Error)]
pub enum MetaIoError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("input contains no samples")]
    EmptyInput,
    #[error("batch size {0} is too small; need at least 2 to split support and query")]
    BatchSize(usize),
    #[error("sample {index}: {reason}")]
    BadSample { index: usize, reason: String },
    #[error("not a record file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported record file version {0}")]
    BadVersion(u32),
    #[error("body checksum mismatch: footer {expected:#010x}, computed {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("corrupt record file: {0}")]
    Corrupt(String),
    #[error("batch {batch_id} mixes tasks {first} and {other}")]
    MixedTasks {
        batch_id: u64,
        first: u64,
        other: u64,
    },
    #[error("worker {worker} out of range for {n} workers")]
    WorkerIndex { worker: usize, n: usize },
    #[error("group of task {task_id} has {len} sample(s); cannot form support and query")]
    Singleton { task_id: u64, len: usize },
}

/// One labeled record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSample {
    pub task_id: u64,
    pub feature_ids: Vec<u64>,
    pub dense_features: Vec<f64>,
    pub label: f64,
}

impl MetaSample {
    /// Bitwise identity, usable for sorting and multiset comparison.
    pub fn key(&self) -> (u64, Vec<u64>, Vec<u64>, u64) {
        (
            self.task_id,
            self.feature_ids.clone(),
            self.dense_features.iter().map(|v| v.to_bits()).collect(),
            self.label.to_bits(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedRecord {
    pub sample: MetaSample,
    pub batch_id: u64,
}

/// A task-uniform batch split for one inner/outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub task_id: u64,
    pub support: Vec<MetaSample>,
    pub query: Vec<MetaSample>,
}

impl TaskBatch {
    pub fn new(
        task_id: u64,
        support: Vec<MetaSample>,
        query: Vec<MetaSample>,
    ) -> Result<Self, MetaIoError> {
        if support.is_empty() || query.is_empty() {
            return Err(MetaIoError::Singleton {
                task_id,
                len: support.len() + query.len(),
            });
        }
        if let Some(s) = support.iter().chain(&query).find(|s| s.task_id != task_id) {
            return Err(MetaIoError::MixedTasks {
                batch_id: u64::MAX,
                first: task_id,
                other: s.task_id,
            });
        }
        Ok(Self {
            task_id,
            support,
            query,
        })
    }

    pub fn len(&self) -> usize {
        self.support.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
