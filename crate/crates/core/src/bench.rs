//! Throughput and traffic benchmarks.

use serde::Serialize;

use crate::collectives::{CollectiveError, Primitive, WorkerGroup};
use crate::metaio::RecordFile;
use crate::trainer::{train_loop, GradMode, TrainConfig, TrainError};

/// Overrides the detected number of execution contexts.
pub const THREADS_ENV: &str = "METASHARD_THREADS";

/// Contexts available to simulated workers: `METASHARD_THREADS` if set to a
/// positive integer, otherwise the detected parallelism.
pub fn available_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeasurement {
    pub samples: usize,
    pub wall_ns: u64,
    pub samples_per_sec: f64,
}

/// One `(n_workers, mode)` configuration, measured `runs.len()` times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchEntry {
    pub n_workers: usize,
    pub mode: GradMode,
    pub iterations: usize,
    pub samples: usize,
    pub runs: Vec<RunMeasurement>,
    pub mean_samples_per_sec: f64,
    pub mean_wall_ns: f64,
    /// Mean throughput over `n_workers` times the n=1 mean throughput.
    pub speedup: Option<f64>,
    pub comm: serde_json::Value,
}

/// Ring all-reduce vs gather traffic for one `(n, k)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrafficEntry {
    pub n: usize,
    pub k: usize,
    pub allreduce_sent_per_worker: Vec<u64>,
    pub allreduce_formula: u64,
    pub gather_root_received: u64,
    pub gather_formula: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub threads: usize,
    pub repeats: usize,
    pub entries: Vec<BenchEntry>,
    pub traffic: Vec<TrafficEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub workers: Vec<usize>,
    pub modes: Vec<GradMode>,
    pub repeats: usize,
    pub traffic: Vec<(usize, usize)>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            workers: vec![1, 2, 4],
            modes: vec![GradMode::FullSecondOrder, GradMode::FirstOrder],
            repeats: 3,
            traffic: vec![(2, 1024), (4, 1024), (8, 4096)],
        }
    }
}

/// Runs one ring all-reduce and one gather (root 0) of `k` elements per
/// worker on a fresh `n`-worker group and reads the counters back.
pub fn measure_traffic(n: usize, k: usize) -> Result<TrafficEntry, CollectiveError> {
    let (results, stats) = WorkerGroup::run(n, |comm| {
        let buf: Vec<f64> = (0..k).map(|j| (comm.rank() * k + j) as f64).collect();
        comm.ring_all_reduce(buf.clone())?;
        comm.gather(0, buf)?;
        Ok::<(), CollectiveError>(())
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;
    let ring = stats.summary(Primitive::AllReduce);
    let gather = stats.summary(Primitive::Gather);
    let (n64, k64) = (n as u64, k as u64);
    Ok(TrafficEntry {
        n,
        k,
        allreduce_sent_per_worker: ring.per_worker_sent,
        allreduce_formula: 2 * k64 * (n64 - 1) / n64,
        gather_root_received: gather.per_worker_received[0],
        gather_formula: k64 * (n64 - 1),
    })
}

/// Trains every `(workers, mode)` pair `repeats` times on `file` with early
/// stopping off and reports throughput, speedup and traffic.
pub fn run_bench(
    base: &TrainConfig,
    file: &RecordFile,
    opts: &BenchOptions,
) -> Result<BenchReport, TrainError> {
    if opts.repeats == 0 {
        return Err(TrainError::Config("repeats must be at least 1".into()));
    }
    let threads = available_threads();
    let mut entries = Vec::new();
    for &mode in &opts.modes {
        let mut baseline: Option<f64> = None;
        for &n in &opts.workers {
            if n > threads {
                log::warn!("{n} workers share {threads} execution contexts");
            }
            let cfg = TrainConfig {
                n_workers: n,
                mode,
                convergence_tol: None,
                metrics_path: None,
                check_replicas: false,
                ..base.clone()
            };
            let mut runs = Vec::with_capacity(opts.repeats);
            let mut last = None;
            for _ in 0..opts.repeats {
                let out = train_loop(&cfg, file)?;
                let samples = out.samples();
                let secs = out.wall_ns.max(1) as f64 * 1e-9;
                runs.push(RunMeasurement {
                    samples,
                    wall_ns: out.wall_ns,
                    samples_per_sec: samples as f64 / secs,
                });
                last = Some(out);
            }
            let out = last.expect("at least one run");
            let mean = runs.iter().map(|r| r.samples_per_sec).sum::<f64>() / runs.len() as f64;
            let mean_wall = runs.iter().map(|r| r.wall_ns as f64).sum::<f64>() / runs.len() as f64;
            let speedup = if n == 1 {
                baseline = Some(mean);
                Some(1.0)
            } else {
                baseline.map(|b| mean / (n as f64 * b))
            };
            entries.push(BenchEntry {
                n_workers: n,
                mode,
                iterations: out.iterations,
                samples: out.samples(),
                runs,
                mean_samples_per_sec: mean,
                mean_wall_ns: mean_wall,
                speedup,
                comm: out.stats.to_json(),
            });
        }
    }
    let traffic = opts
        .traffic
        .iter()
        .map(|&(n, k)| measure_traffic(n, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BenchReport {
        threads,
        repeats: opts.repeats,
        entries,
        traffic,
    })
}
