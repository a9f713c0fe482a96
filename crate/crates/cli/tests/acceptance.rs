//! Acceptance suite: one line per criterion.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};

use common::oracle::{flatten, meta_objective, sample};
use metashard::bench::{available_threads, measure_traffic, run_bench, BenchOptions};
use metashard::collectives::{Primitive, WorkerGroup};
use metashard::datagen::TaskFamily;
use metashard::embedding::{EmbeddingShard, ShardMap};
use metashard::metaio::{
    assign_batches, group_batch, load_worker_range, preprocess, worker_batch_range, MetaSample,
    TaskBatch,
};
use metashard::nn::{Activation, DenseParams, LossKind};
use metashard::trainer::{
    adapted_query_loss, initial_dense, meta_iteration, prefetch_local, task_meta_gradient,
    train_loop, verify, BatchStream, GradMode, HyperParams, MetaModel, ModelSpec, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const SKIP: &str = "skip:";

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const MODES: [GradMode; 2] = [GradMode::FullSecondOrder, GradMode::FirstOrder];

fn serial_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = common::record_file(dir.path(), &TaskFamily::default(), 32, 3);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut ok = true;
    let start = std::time::Instant::now();
    for n in [1, 2, 4] {
        for mode in MODES {
            let cfg = common::config(&file, n, mode, 200);
            let (report, _) = verify(&cfg, &file, n, mode).map_err(|e| e.to_string())?;
            ok &= report.iterations == 200 && report.divergence.iter().all(|&d| d <= 1e-9);
            worst = worst.max(report.max_divergence);
            parts.push(format!("n={n} {mode}: {:.1e}", report.max_divergence));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        ok && secs <= 120.0,
        format!(
            "max divergence {worst:.2e} <= 1e-9 over 200 iterations [{}], {secs:.1}s",
            parts.join(", ")
        ),
    )
}

fn traffic_laws() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (n, k) in [(2usize, 1024usize), (4, 1024), (8, 4096)] {
        let t = measure_traffic(n, k).map_err(|e| e.to_string())?;
        let ring = (2 * k * (n - 1) / n) as u64;
        let gather = (k * (n - 1)) as u64;
        ok &= t.allreduce_sent_per_worker.iter().all(|&s| s == ring)
            && t.gather_root_received == gather;
        parts.push(format!(
            "(N={n},K={k}) ring {:?}/{ring} gather {}/{gather}",
            t.allreduce_sent_per_worker[0], t.gather_root_received
        ));
    }
    check(ok, parts.join("; "))
}

fn overlap_batch(rng: &mut ChaCha8Rng, support: &[u64], query: &[u64]) -> TaskBatch {
    let make = |rng: &mut ChaCha8Rng, ids: &[u64]| -> Vec<MetaSample> {
        ids.chunks(2)
            .map(|c| {
                let dense: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                sample(1, c, &dense, f64::from(rng.random_bool(0.5) as u8))
            })
            .collect()
    };
    let s = make(rng, support);
    let q = make(rng, query);
    TaskBatch::new(1, s, q).unwrap()
}

fn prefetch_aggregation() -> Outcome {
    let spec = ModelSpec {
        embedding_dim: 8,
        mlp_dims: vec![16, 8, 1],
        activation: Activation::Tanh,
        loss: LossKind::Bce,
        clip_grad_norm: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let support: Vec<u64> = (0..8).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for (fraction, shared) in [(0.0, 0u64), (0.5, 4), (1.0, 8)] {
        let query: Vec<u64> = (8 - shared..16 - shared).collect();
        let batches: Vec<TaskBatch> = (0..4)
            .map(|_| overlap_batch(&mut rng, &support, &query))
            .collect();
        let map = ShardMap::new(4).unwrap();
        let iterations = 3;
        let (calls, stats) = WorkerGroup::run(4, |comm| {
            let mut model = MetaModel {
                shard: EmbeddingShard::new(comm.rank(), map, 8, 1),
                dense: initial_dense(&spec, 1).unwrap(),
                hyper: HyperParams {
                    alpha: 0.1,
                    beta: 0.1,
                    inner_steps: 1,
                    mode: GradMode::FullSecondOrder,
                },
            };
            (0..iterations)
                .map(|_| {
                    meta_iteration(comm, &mut model, &batches[comm.rank()], &spec)
                        .unwrap()
                        .lookup_calls
                })
                .collect::<Vec<_>>()
        });
        let all_two = calls.iter().flatten().all(|&c| c == 2);
        let total = stats.summary(Primitive::AllToAll).calls;
        ok &= all_two && total == 3 * iterations as u64;
        parts.push(format!("overlap {fraction}: lookup calls {:?}", calls[0]));
    }
    // The same count inside the training loop.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fam = TaskFamily {
        num_tasks: 40,
        samples_per_task: 128,
        ..TaskFamily::default()
    };
    let file = common::record_file(dir.path(), &fam, 32, 2);
    let out = train_loop(
        &common::config(&file, 4, GradMode::FullSecondOrder, 20),
        &file,
    )
    .map_err(|e| e.to_string())?;
    let loop_ok = out.metrics.iter().all(|r| r.lookup_calls == 2);
    ok &= loop_ok;
    parts.push(format!(
        "train loop: {} records all 2 = {loop_ok}",
        out.metrics.len()
    ));
    check(ok, parts.join("; "))
}

fn second_order_finite_differences() -> Outcome {
    // dim 1, dense width 3, MLP 4 -> 7 -> 1: 43 dense parameters + 7 rows.
    let spec = ModelSpec {
        embedding_dim: 1,
        mlp_dims: vec![4, 7, 1],
        activation: Activation::Tanh,
        loss: LossKind::Bce,
        clip_grad_norm: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let set = |rng: &mut ChaCha8Rng| -> Vec<MetaSample> {
        (0..7u64)
            .map(|j| {
                let ids = [j % 7 + 1, (j + 3) % 7 + 1, (j + 5) % 7 + 1];
                let dense: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                sample(0, &ids, &dense, f64::from(rng.random_bool(0.5) as u8))
            })
            .collect()
    };
    let support = set(&mut rng);
    let query = set(&mut rng);
    let batch = TaskBatch::new(0, support, query).unwrap();
    let mut table = EmbeddingShard::unsharded(1, 5);
    let mut prefetch = prefetch_local(&batch, &mut table).map_err(|e| e.to_string())?;
    for id in prefetch.ids.clone() {
        prefetch.rows.insert(id, vec![rng.random_range(-1.0..1.0)]);
    }
    let dense = DenseParams::init(&spec.mlp_dims, spec.activation, 17).unwrap();
    let hyper = HyperParams {
        alpha: 0.5,
        beta: 0.1,
        inner_steps: 1,
        mode: GradMode::FullSecondOrder,
    };
    let x = flatten(&prefetch, &dense);
    if x.len() != 50 {
        return Err(format!("model has {} parameters", x.len()));
    }
    let g =
        task_meta_gradient(&prefetch, &dense, &batch, &spec, &hyper).map_err(|e| e.to_string())?;
    let rows: HashMap<u64, Vec<f64>> = g.embedding.iter().cloned().collect();
    let mut grad: Vec<f64> = prefetch.ids.iter().map(|id| rows[id][0]).collect();
    grad.extend(&g.dense);

    let f = |v: &[f64]| meta_objective(v, &prefetch, &dense, &batch, &spec, &hyper);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut d: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        let up: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let down: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        let fd = (f(&up) - f(&down)) / (2.0 * h);
        let an: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
        worst = worst.max((an - fd).abs() / fd.abs().max(an.abs()));
    }
    check(
        worst <= 1e-4,
        format!("max relative error {worst:.2e} <= 1e-4 over 20 directions, 50 parameters"),
    )
}

type Key = (u64, Vec<u64>, Vec<u64>, u64);

fn multiset(samples: &[MetaSample]) -> BTreeMap<Key, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.key()).or_insert(0) += 1;
    }
    m
}

fn meta_io_invariants() -> Outcome {
    let fam = TaskFamily::default();
    let samples = fam.generate().map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pre = preprocess(samples.clone(), 32, 99).map_err(|e| e.to_string())?;
    let file = pre
        .write_file(dir.path().join("io.gmio"))
        .map_err(|e| e.to_string())?;
    let want = multiset(&samples);

    let mut uniform = true;
    let mut conserved = true;
    let mut cover = true;
    let mut monotone = true;
    for n in [1, 2, 4, 8] {
        let mut out = Vec::with_capacity(samples.len());
        let mut seen = vec![0usize; file.batch_count()];
        for i in 0..n {
            for b in worker_batch_range(file.batch_count(), i, n) {
                seen[b] += 1;
            }
            let mut reader = load_worker_range(&file, i, n)
                .map_err(|e| e.to_string())?
                .with_trace();
            for g in group_batch(reader.by_ref()) {
                let g = g.map_err(|e| e.to_string())?;
                uniform &= g.samples.iter().all(|s| s.task_id == g.task_id);
                out.extend(g.samples);
            }
            monotone &= reader.positions().windows(2).all(|w| w[0] <= w[1]);
        }
        cover &= seen.iter().all(|&c| c == 1);
        conserved &= multiset(&out) == want;
    }
    let mut sorted = pre.batches.clone();
    sorted.sort_by_key(|b| b.batch_id);
    let order = sorted == assign_batches(samples.clone(), 32).map_err(|e| e.to_string())?;
    check(
        uniform && conserved && order && cover && monotone,
        format!(
            "{} samples, {} tasks, {} batches: (a) uniform {uniform} (b) conserved {conserved} (c) order {order} (d) cover {cover} (e) monotone {monotone}",
            samples.len(),
            fam.num_tasks,
            file.batch_count()
        ),
    )
}

fn adaptation_sanity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = common::record_file(dir.path(), &TaskFamily::default(), 32, 3);
    let mut cfg = common::config(&file, 4, GradMode::FullSecondOrder, 500);
    cfg.alpha = 0.3;
    cfg.beta = 0.05;
    let spec = cfg.model_spec();
    let hyper = cfg.hyper();
    // Held-out task batches: the last range of a 32-way split is never
    // reached by 500 iterations on 4 workers.
    let mut stream =
        BatchStream::new(&file, 31, 32, cfg.support_ratio, 1).map_err(|e| e.to_string())?;
    let mut eval = Vec::new();
    while let Some(b) = stream.next_batch().map_err(|e| e.to_string())? {
        eval.push(b);
    }
    let init_table = EmbeddingShard::unsharded(spec.embedding_dim, cfg.seed);
    let init_dense = initial_dense(&spec, cfg.seed).map_err(|e| e.to_string())?;
    let before = adapted_query_loss(&eval, &init_table, &init_dense, &spec, &hyper)
        .map_err(|e| e.to_string())?;
    let out = train_loop(&cfg, &file).map_err(|e| e.to_string())?;
    let table = out.table().map_err(|e| e.to_string())?;
    let after =
        adapted_query_loss(&eval, &table, &out.dense, &spec, &hyper).map_err(|e| e.to_string())?;
    let unadapted = adapted_query_loss(
        &eval,
        &table,
        &out.dense,
        &spec,
        &HyperParams {
            alpha: 0.0,
            ..hyper
        },
    )
    .map_err(|e| e.to_string())?;
    let ratio = after / before;
    check(
        out.iterations == 500 && ratio < 0.5 && after < unadapted,
        format!(
            "{} iterations; mean adapted query loss over {} held-out tasks {before:.4} -> {after:.4} (ratio {ratio:.3} < 0.5); unadapted {unadapted:.4}",
            out.iterations,
            eval.len()
        ),
    )
}

fn scaling_smoke() -> Outcome {
    let threads = available_threads();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = common::record_file(dir.path(), &TaskFamily::default(), 32, 3);
    let cfg = common::config(&file, 1, GradMode::FullSecondOrder, 150);
    let opts = BenchOptions {
        workers: vec![1, 4],
        modes: vec![GradMode::FullSecondOrder],
        repeats: 3,
        traffic: Vec::new(),
    };
    let report = run_bench(&cfg, &file, &opts).map_err(|e| e.to_string())?;
    let t1 = report.entries[0].mean_samples_per_sec;
    let t4 = report.entries[1].mean_samples_per_sec;
    let ratio = t4 / t1;
    let detail = format!("{threads} execution contexts; 3-run mean throughput n=1 {t1:.0}/s, n=4 {t4:.0}/s, ratio {ratio:.2}");
    if threads < 4 {
        return Ok(format!("{SKIP}(needs >= 4 cores) {detail}"));
    }
    check(ratio >= 2.0, format!("{detail} >= 2.0"))
}

fn strip_timing(metrics: &str) -> Vec<serde_json::Value> {
    metrics
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("elapsed_ns");
            v
        })
        .collect()
}

fn train_twice_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fam = TaskFamily {
        num_tasks: 60,
        samples_per_task: 160,
        ..TaskFamily::default()
    };
    let file = common::record_file(dir.path(), &fam, 32, 8);
    let bin = env!("CARGO_BIN_EXE_metashard");
    let mut outputs = Vec::new();
    for run in 0..2 {
        let cfg = TrainConfig {
            metrics_path: Some(dir.path().join(format!("metrics{run}.jsonl"))),
            ..common::config(&file, 4, GradMode::FullSecondOrder, 40)
        };
        let cfg_path = dir.path().join(format!("cfg{run}.json"));
        std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap())
            .map_err(|e| e.to_string())?;
        let out_dir = dir.path().join(format!("model{run}"));
        let status = Command::new(bin)
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("train exited with {status}"));
        }
        outputs.push(out_dir);
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    let mut same = read(&outputs[0].join("dense.bin")) == read(&outputs[1].join("dense.bin"));
    for i in 0..4 {
        let name = format!("shard_{i}.bin");
        same &= read(&outputs[0].join(&name)) == read(&outputs[1].join(&name));
    }
    let m0 = std::fs::read_to_string(dir.path().join("metrics0.jsonl")).unwrap();
    let m1 = std::fs::read_to_string(dir.path().join("metrics1.jsonl")).unwrap();
    let (a, b) = (strip_timing(&m0), strip_timing(&m1));
    let metrics_same = a == b && a.len() == 160;
    check(
        same && metrics_same,
        format!(
            "parameters bit-identical {same}; {} metric records identical {metrics_same}",
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("serial-oracle equivalence", serial_equivalence),
        ("communication-volume laws", traffic_laws),
        ("prefetch aggregation", prefetch_aggregation),
        ("second-order correctness", second_order_finite_differences),
        ("meta-io invariants", meta_io_invariants),
        ("adaptation sanity", adaptation_sanity),
        ("scaling smoke test", scaling_smoke),
        ("determinism", train_twice_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => match detail.strip_prefix(SKIP) {
                Some(rest) => println!("criterion {} {name}: SKIPPED {rest}", i + 1),
                None => println!("criterion {} {name}: PASS {detail}", i + 1),
            },
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed or skipped, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
