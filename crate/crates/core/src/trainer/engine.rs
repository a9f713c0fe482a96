use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::time::Instant;

use serde::Serialize;

use crate::collectives::{CommStats, Communicator, WorkerGroup};
use crate::embedding::{EmbeddingShard, ShardMap};
use crate::metaio::{
    group_batch, load_worker_range, preprocess, read_csv, worker_batch_range, GroupBatches,
    RangeReader, RecordFile, Splitter, MAGIC,
};
use crate::nn::DenseParams;

use super::config::TrainConfig;
use super::step::{meta_iteration, MetaModel};
use super::{dense_seed, embedding_seed, ModelSpec, TaskBatch, TrainError};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub worker: usize,
    pub query_loss: f64,
    pub samples: usize,
    pub elapsed_ns: u64,
    #[serde(skip)]
    pub support_loss: f64,
    #[serde(skip)]
    pub lookup_calls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Ran the configured number of iterations.
    Budget,
    /// Some worker's range ran out of usable batches first.
    DataExhausted,
    Converged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub shards: Vec<EmbeddingShard>,
    pub dense: DenseParams,
    /// Sorted by `(iter, worker)`.
    pub metrics: Vec<IterationRecord>,
    pub stats: CommStats,
    pub iterations: usize,
    pub stop: StopReason,
    pub skipped_singletons: usize,
    pub wall_ns: u64,
}

impl TrainOutcome {
    /// All shards as one unsharded table.
    pub fn table(&self) -> Result<EmbeddingShard, TrainError> {
        Ok(EmbeddingShard::merge(&self.shards)?)
    }

    pub fn samples(&self) -> usize {
        self.metrics.iter().map(|r| r.samples).sum()
    }

    /// Mean query loss over workers, per iteration.
    pub fn mean_query_loss(&self) -> Vec<f64> {
        let mut sums = vec![(0.0, 0usize); self.iterations];
        for r in &self.metrics {
            sums[r.iter].0 += r.query_loss;
            sums[r.iter].1 += 1;
        }
        sums.into_iter().map(|(s, c)| s / c as f64).collect()
    }

    /// Writes the metrics stream as JSON lines.
    pub fn write_metrics<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = BufWriter::new(out);
        for r in &self.metrics {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn initial_dense(spec: &ModelSpec, seed: u64) -> Result<DenseParams, TrainError> {
    Ok(DenseParams::init(
        &spec.mlp_dims,
        spec.activation,
        dense_seed(seed),
    )?)
}

/// Task batches of one worker's range, repeated for `epochs` passes.
pub struct BatchStream {
    file: RecordFile,
    worker: usize,
    n: usize,
    epochs_left: usize,
    groups: Option<GroupBatches<RangeReader>>,
    splitter: Splitter,
}

impl BatchStream {
    pub fn new(
        file: &RecordFile,
        worker: usize,
        n: usize,
        support_ratio: f64,
        epochs: usize,
    ) -> Result<Self, TrainError> {
        Ok(Self {
            file: file.clone(),
            worker,
            n,
            epochs_left: epochs,
            groups: None,
            splitter: Splitter::new(support_ratio),
        })
    }

    /// Batches in the worker's range with at least two records.
    pub fn usable(file: &RecordFile, worker: usize, n: usize) -> usize {
        file.index()[worker_batch_range(file.batch_count(), worker, n)]
            .iter()
            .filter(|e| e.record_count >= 2)
            .count()
    }

    pub fn skipped(&self) -> usize {
        self.splitter.skipped
    }

    pub fn next_batch(&mut self) -> Result<Option<TaskBatch>, TrainError> {
        loop {
            if self.groups.is_none() {
                if self.epochs_left == 0 {
                    return Ok(None);
                }
                self.epochs_left -= 1;
                let reader = load_worker_range(&self.file, self.worker, self.n)?;
                self.groups = Some(group_batch(reader));
            }
            match self.groups.as_mut().and_then(Iterator::next) {
                None => self.groups = None,
                Some(group) => {
                    if let Some(batch) = self.splitter.split(group?) {
                        return Ok(Some(batch));
                    }
                }
            }
        }
    }
}

/// Opens `cfg.data_path` as a record file, preprocessing it first when it
/// is a CSV file (written alongside with a `.gmio` extension).
pub fn resolve_data(cfg: &TrainConfig) -> Result<RecordFile, TrainError> {
    let mut magic = [0u8; 4];
    let is_record_file = {
        let mut f = File::open(&cfg.data_path)?;
        f.read(&mut magic)? == 4 && magic == MAGIC
    };
    let file = if is_record_file {
        RecordFile::open(&cfg.data_path)?
    } else {
        let (samples, _) = read_csv(File::open(&cfg.data_path)?)?;
        let out = cfg.data_path.with_extension("gmio");
        preprocess(samples, cfg.batch_size, cfg.seed)?.write_file(out)?
    };
    let h = file.header();
    if h.batch_size as usize != cfg.batch_size {
        return Err(TrainError::Config(format!(
            "record file batch size {} != configured {}",
            h.batch_size, cfg.batch_size
        )));
    }
    let want = cfg.model_spec().dense_width();
    if h.dense_width as usize != want {
        return Err(TrainError::Config(format!(
            "record file dense width {} != mlp input {} - embedding_dim {}",
            h.dense_width, cfg.mlp_dims[0], cfg.embedding_dim
        )));
    }
    Ok(file)
}

fn converged(history: &[f64], window: usize, tol: f64) -> bool {
    let len = history.len();
    if len < 2 * window {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&history[len - 2 * window..len - window]);
    let cur = mean(&history[len - window..]);
    (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < tol
}

struct WorkerOutcome {
    model: MetaModel,
    records: Vec<IterationRecord>,
    iterations: usize,
    stop: StopReason,
    skipped: usize,
}

fn check_replicas(comm: &mut Communicator, dense: &DenseParams) -> Result<(), TrainError> {
    let mine = dense.flatten();
    let root = comm.broadcast(0, mine.clone())?;
    let max_diff = mine
        .iter()
        .zip(&root)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if max_diff > 0.0 || root.len() != mine.len() {
        return Err(TrainError::ReplicaDivergence {
            worker: comm.rank(),
            max_diff,
        });
    }
    Ok(())
}

type Hook<'a> = &'a (dyn Fn(usize, &MetaModel) + Sync);

fn run_worker(
    comm: &mut Communicator,
    cfg: &TrainConfig,
    file: &RecordFile,
    budget: usize,
    hook: Hook<'_>,
) -> Result<WorkerOutcome, TrainError> {
    let (me, n) = (comm.rank(), comm.size());
    let spec = cfg.model_spec();
    let mut dense = initial_dense(&spec, cfg.seed)?;
    let flat = comm.broadcast(0, if me == 0 { dense.flatten() } else { Vec::new() })?;
    dense.assign_flat(&flat)?;
    let mut model = MetaModel {
        shard: EmbeddingShard::new(
            me,
            ShardMap::new(n)?,
            spec.embedding_dim,
            embedding_seed(cfg.seed),
        ),
        dense,
        hyper: cfg.hyper(),
    };

    let mut stream = BatchStream::new(file, me, n, cfg.support_ratio, cfg.epochs)?;
    let mut records = Vec::with_capacity(budget);
    let mut history = Vec::new();
    let mut stop = if budget < cfg.iterations {
        StopReason::DataExhausted
    } else {
        StopReason::Budget
    };
    let mut iterations = 0;
    for iter in 0..budget {
        let batch = stream.next_batch()?.ok_or_else(|| {
            TrainError::Config(format!(
                "worker {me} ran out of batches at iteration {iter}"
            ))
        })?;
        let start = Instant::now();
        let out = meta_iteration(comm, &mut model, &batch, &spec)?;
        let elapsed_ns = start.elapsed().as_nanos() as u64;
        records.push(IterationRecord {
            iter,
            worker: me,
            query_loss: out.query_loss,
            samples: out.samples,
            elapsed_ns,
            support_loss: out.support_loss,
            lookup_calls: out.lookup_calls,
        });
        iterations = iter + 1;
        hook(iter, &model);
        if cfg.check_replicas {
            check_replicas(comm, &model.dense)?;
        }
        if let Some(tol) = cfg.convergence_tol {
            let total = comm.sum_metrics(vec![out.query_loss])?[0];
            history.push(total / n as f64);
            if converged(&history, cfg.convergence_window, tol) {
                stop = StopReason::Converged;
                break;
            }
        }
    }
    Ok(WorkerOutcome {
        model,
        records,
        iterations,
        stop,
        skipped: stream.skipped(),
    })
}

/// Iteration budget every worker can honor: no worker may run dry.
pub fn iteration_budget(cfg: &TrainConfig, file: &RecordFile) -> usize {
    let per_worker = (0..cfg.n_workers)
        .map(|i| BatchStream::usable(file, i, cfg.n_workers) * cfg.epochs)
        .min()
        .unwrap_or(0);
    if per_worker < cfg.iterations {
        log::warn!(
            "data supports {per_worker} of {} requested iterations",
            cfg.iterations
        );
    }
    per_worker.min(cfg.iterations)
}

/// Runs training with `hook` called on every worker after each iteration.
pub fn train_with_hook(
    cfg: &TrainConfig,
    file: &RecordFile,
    hook: Hook<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let budget = iteration_budget(cfg, file);
    let start = Instant::now();
    let (results, stats) = WorkerGroup::run(cfg.n_workers, |comm| {
        run_worker(comm, cfg, file, budget, hook)
    });
    let wall_ns = start.elapsed().as_nanos() as u64;

    let mut outs = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(o) => outs.push(o),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        let pos = errors.iter().position(|e| !e.is_secondary()).unwrap_or(0);
        return Err(errors.swap_remove(pos));
    }

    let iterations = outs[0].iterations;
    let stop = outs[0].stop;
    let skipped_singletons = outs.iter().map(|o| o.skipped).sum();
    let mut metrics: Vec<IterationRecord> =
        outs.iter_mut().flat_map(|o| o.records.drain(..)).collect();
    metrics.sort_by_key(|r| (r.iter, r.worker));
    let dense = outs[0].model.dense.clone();
    let shards = outs.into_iter().map(|o| o.model.shard).collect();
    let outcome = TrainOutcome {
        shards,
        dense,
        metrics,
        stats,
        iterations,
        stop,
        skipped_singletons,
        wall_ns,
    };
    if let Some(path) = &cfg.metrics_path {
        outcome.write_metrics(File::create(path)?)?;
    }
    Ok(outcome)
}

/// Algorithm driver: load per-worker task batches, prefetch, adapt, update,
/// until the budget, the data, or the convergence test ends it.
pub fn train_loop(cfg: &TrainConfig, file: &RecordFile) -> Result<TrainOutcome, TrainError> {
    train_with_hook(cfg, file, &|_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_rule() {
        let flat = vec![1.0; 100];
        assert!(converged(&flat, 50, 1e-4));
        let falling: Vec<f64> = (0..100).map(|i| 2.0 - i as f64 * 0.01).collect();
        assert!(!converged(&falling, 50, 1e-4));
        assert!(!converged(&flat[..99], 50, 1e-4));
    }
}
