//! Parallel engine vs serial oracle, compared after every iteration.

use std::collections::BTreeMap;
use std::sync::mpsc::channel;
use std::sync::Mutex;
use std::thread;

use serde::Serialize;

use crate::embedding::{EmbeddingShard, FeatureId};
use crate::metaio::RecordFile;

use super::config::TrainConfig;
use super::engine::{initial_dense, train_with_hook, BatchStream, TrainOutcome};
use super::serial::{serial_reference, SerialModel};
use super::{embedding_seed, GradMode, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub n_workers: usize,
    pub mode: GradMode,
    pub iterations: usize,
    /// Max absolute parameter difference after each iteration.
    pub divergence: Vec<f64>,
    pub max_divergence: f64,
}

struct Snapshot {
    iter: usize,
    worker: usize,
    rows: BTreeMap<FeatureId, Vec<f64>>,
    dense: Vec<f64>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn compare(serial: &SerialModel, snaps: &[Snapshot]) -> f64 {
    let n = snaps.len();
    let mut worst = 0.0f64;
    for s in snaps {
        worst = worst.max(max_abs_diff(&s.dense, &serial.dense.flatten()));
    }
    let materialized: usize = snaps.iter().map(|s| s.rows.len()).sum();
    if materialized != serial.table.len() {
        return f64::INFINITY;
    }
    for (id, row) in serial.table.rows() {
        let owner = (*id % n as u64) as usize;
        match snaps[owner].rows.get(id) {
            Some(r) => worst = worst.max(max_abs_diff(r, row)),
            None => return f64::INFINITY,
        }
    }
    worst
}

/// Trains `n_workers` workers with `mode` and, after every iteration,
/// replays the same task batches through [`serial_reference`] and records
/// the largest parameter divergence. Early stopping is disabled.
pub fn verify(
    cfg: &TrainConfig,
    file: &RecordFile,
    n_workers: usize,
    mode: GradMode,
) -> Result<(VerifyReport, TrainOutcome), TrainError> {
    let cfg = TrainConfig {
        n_workers,
        mode,
        convergence_tol: None,
        check_replicas: true,
        metrics_path: None,
        ..cfg.clone()
    };
    cfg.validate()?;
    let spec = cfg.model_spec();
    let hyper = cfg.hyper();

    let mut serial = SerialModel {
        table: EmbeddingShard::unsharded(spec.embedding_dim, embedding_seed(cfg.seed)),
        dense: initial_dense(&spec, cfg.seed)?,
    };
    let mut streams = (0..n_workers)
        .map(|i| BatchStream::new(file, i, n_workers, cfg.support_ratio, cfg.epochs))
        .collect::<Result<Vec<_>, _>>()?;

    let (tx, rx) = channel::<Snapshot>();
    let tx = Mutex::new(tx);
    let hook = move |iter: usize, model: &super::MetaModel| {
        let snap = Snapshot {
            iter,
            worker: model.shard.owner(),
            rows: model.shard.rows().clone(),
            dense: model.dense.flatten(),
        };
        let _ = tx.lock().expect("snapshot channel").send(snap);
    };

    thread::scope(|s| {
        let par_cfg = cfg.clone();
        let parallel = s.spawn(move || {
            let out = train_with_hook(&par_cfg, file, &hook);
            drop(hook);
            out
        });
        let mut pending: BTreeMap<usize, Vec<Option<Snapshot>>> = BTreeMap::new();
        let mut divergence = Vec::new();
        // The channel closes when training ends and drops the hook.
        for snap in rx.iter() {
            let slot = pending
                .entry(snap.iter)
                .or_insert_with(|| (0..n_workers).map(|_| None).collect());
            let w = snap.worker;
            slot[w] = Some(snap);
            while let Some(entry) = pending.first_entry() {
                if *entry.key() != divergence.len() || entry.get().iter().any(Option::is_none) {
                    break;
                }
                let snaps: Vec<Snapshot> = entry.remove().into_iter().flatten().collect();
                let mut batches = Vec::with_capacity(n_workers);
                for st in streams.iter_mut() {
                    batches.push(st.next_batch()?.ok_or_else(|| {
                        TrainError::Config("serial replay ran out of batches".into())
                    })?);
                }
                serial_reference(&batches, &mut serial, &spec, &hyper)?;
                debug_assert!(snaps.iter().all(|s| s.iter == divergence.len()));
                divergence.push(compare(&serial, &snaps));
            }
        }
        let outcome = parallel
            .join()
            .unwrap_or_else(|e| std::panic::resume_unwind(e))?;
        if divergence.len() != outcome.iterations {
            return Err(TrainError::Config(format!(
                "compared {} of {} iterations",
                divergence.len(),
                outcome.iterations
            )));
        }
        let max_divergence = divergence.iter().copied().fold(0.0, f64::max);
        Ok((
            VerifyReport {
                n_workers,
                mode,
                iterations: outcome.iterations,
                divergence,
                max_divergence,
            },
            outcome,
        ))
    })
}
