#![allow(dead_code)]

use std::path::Path;

use metashard::datagen::TaskFamily;
use metashard::metaio::{preprocess, RecordFile};
use metashard::nn::{Activation, LossKind};
use metashard::trainer::{GradMode, TrainConfig};

pub fn record_file(dir: &Path, family: &TaskFamily, batch_size: usize, seed: u64) -> RecordFile {
    let samples = family.generate().unwrap();
    preprocess(samples, batch_size, seed)
        .unwrap()
        .write_file(dir.join("data.gmio"))
        .unwrap()
}

pub fn config(
    file: &RecordFile,
    n_workers: usize,
    mode: GradMode,
    iterations: usize,
) -> TrainConfig {
    TrainConfig {
        n_workers,
        alpha: 0.05,
        beta: 0.02,
        inner_steps: 1,
        mode,
        batch_size: file.header().batch_size as usize,
        embedding_dim: 8,
        mlp_dims: vec![8 + file.header().dense_width as usize, 8, 1],
        iterations,
        seed: 11,
        data_path: file.path().to_path_buf(),
        metrics_path: None,
        support_ratio: 0.5,
        loss: LossKind::Bce,
        activation: Activation::Tanh,
        epochs: 1,
        convergence_tol: None,
        convergence_window: 50,
        clip_grad_norm: false,
        check_replicas: false,
    }
}
pub mod oracle;
