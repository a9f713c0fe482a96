use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use metashard::bench::{run_bench, BenchOptions};
use metashard::collectives::CollectiveError;
use metashard::datagen::{DataGenError, TaskFamily};
use metashard::metaio::{preprocess, read_csv, write_csv, MetaIoError};
use metashard::trainer::{resolve_data, train_loop, verify, GradMode, TrainConfig, TrainError};

/// Hybrid-parallel meta-learning on simulated workers.
#[derive(Parser)]
#[command(name = "metashard", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task family as CSV.
    GenData {
        /// Task family JSON; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sort, batch and shuffle a CSV into a record file.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write the final parameters to a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        mode: Option<GradMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare parallel training against the serial oracle.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Worker counts to check.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4])]
        workers: Vec<usize>,
        /// Only check this mode; both by default.
        #[arg(long)]
        mode: Option<GradMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Throughput, speedup and traffic report.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4])]
        workers: Vec<usize>,
        #[arg(long)]
        mode: Option<GradMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit codes.
const BAD_INPUT: u8 = 1;
const TOLERANCE: u8 = 2;
const INTERNAL: u8 = 3;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn bad_input(message: impl Into<String>) -> Self {
        Self {
            code: BAD_INPUT,
            message: message.into(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) | TrainError::Io(_) => BAD_INPUT,
            TrainError::MetaIo(m) => meta_io_code(m),
            _ => INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn meta_io_code(e: &MetaIoError) -> u8 {
    match e {
        MetaIoError::MixedTasks { .. } => INTERNAL,
        _ => BAD_INPUT,
    }
}

impl From<MetaIoError> for Failure {
    fn from(e: MetaIoError) -> Self {
        Self {
            code: meta_io_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<DataGenError> for Failure {
    fn from(e: DataGenError) -> Self {
        Self::bad_input(e.to_string())
    }
}

impl From<CollectiveError> for Failure {
    fn from(e: CollectiveError) -> Self {
        Self {
            code: INTERNAL,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::bad_input(e.to_string())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::bad_input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::bad_input(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure {
        code: INTERNAL,
        message: e.to_string(),
    })?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    if !path.exists() {
        return Err(Failure::bad_input(format!(
            "{}: no such file",
            path.display()
        )));
    }
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut family: TaskFamily = match config {
        Some(p) => read_json(p)?,
        None => TaskFamily::default(),
    };
    if let Some(s) = seed {
        family.seed = s;
    }
    let samples = family.generate()?;
    write_csv(&samples, family.dense_width, File::create(out)?)?;
    info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn preprocess_cmd(input: &Path, batch_size: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let (samples, _) = read_csv(File::open(input)?)?;
    let pre = preprocess(samples, batch_size, seed)?;
    let file = pre.write_file(out)?;
    let h = file.header();
    println!(
        "{}: {} records in {} batches ({} partial)",
        out.display(),
        h.record_count,
        h.batch_count,
        pre.partial_batches()
    );
    Ok(())
}

fn train_cmd(
    config: &Path,
    workers: Option<usize>,
    mode: Option<GradMode>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config, seed)?;
    if let Some(n) = workers {
        cfg.n_workers = n;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let file = resolve_data(&cfg)?;
    let outcome = train_loop(&cfg, &file)?;

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut dense = BufWriter::new(File::create(dir.join("dense.bin"))?);
        for v in outcome.dense.flatten() {
            dense.write_all(&v.to_le_bytes())?;
        }
        dense.flush()?;
        for (i, shard) in outcome.shards.iter().enumerate() {
            let f = File::create(dir.join(format!("shard_{i}.bin")))?;
            let mut w = BufWriter::new(f);
            shard.dump(&mut w).map_err(|e| Failure {
                code: INTERNAL,
                message: e.to_string(),
            })?;
            w.flush()?;
        }
    }
    let losses = outcome.mean_query_loss();
    let summary = serde_json::json!({
        "n_workers": cfg.n_workers,
        "mode": cfg.mode,
        "iterations": outcome.iterations,
        "stop": outcome.stop,
        "samples": outcome.samples(),
        "skipped_singletons": outcome.skipped_singletons,
        "first_query_loss": losses.first(),
        "last_query_loss": losses.last(),
        "wall_ns": outcome.wall_ns,
        "comm": outcome.stats.to_json(),
    });
    write_json(&summary, out.map(|d| d.join("summary.json")).as_deref())?;
    Ok(())
}

fn verify_cmd(
    config: &Path,
    workers: &[usize],
    mode: Option<GradMode>,
    seed: Option<u64>,
    tolerance: f64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config, seed)?;
    let file = resolve_data(&cfg)?;
    let modes = match mode {
        Some(m) => vec![m],
        None => vec![GradMode::FullSecondOrder, GradMode::FirstOrder],
    };
    let mut reports = Vec::new();
    let mut breach = false;
    for &m in &modes {
        for &n in workers {
            let (report, _) = verify(&cfg, &file, n, m)?;
            let ok = report.max_divergence <= tolerance;
            eprintln!(
                "n={n} mode={m} iterations={} max_divergence={:e} {}",
                report.iterations,
                report.max_divergence,
                if ok { "ok" } else { "BREACH" }
            );
            breach |= !ok;
            reports.push(report);
        }
    }
    write_json(
        &serde_json::json!({ "tolerance": tolerance, "runs": reports }),
        out,
    )?;
    if breach {
        return Err(Failure {
            code: TOLERANCE,
            message: format!("divergence above {tolerance:e}"),
        });
    }
    Ok(())
}

fn bench_cmd(
    config: &Path,
    workers: Vec<usize>,
    mode: Option<GradMode>,
    seed: Option<u64>,
    repeats: usize,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config, seed)?;
    let file = resolve_data(&cfg)?;
    let mut opts = BenchOptions {
        workers,
        repeats,
        ..BenchOptions::default()
    };
    if let Some(m) = mode {
        opts.modes = vec![m];
    }
    let report = run_bench(&cfg, &file, &opts)?;
    for e in &report.entries {
        eprintln!(
            "n={} mode={} samples/s={:.1} speedup={}",
            e.n_workers,
            e.mode,
            e.mean_samples_per_sec,
            e.speedup.map_or("-".into(), |s| format!("{s:.3}"))
        );
    }
    write_json(&report, out)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Preprocess {
            input,
            batch_size,
            seed,
            out,
        } => preprocess_cmd(&input, batch_size, seed, &out),
        Command::Train {
            config,
            workers,
            mode,
            seed,
            out,
        } => train_cmd(&config, workers, mode, seed, out.as_deref()),
        Command::Verify {
            config,
            workers,
            mode,
            seed,
            tolerance,
            out,
        } => verify_cmd(&config, &workers, mode, seed, tolerance, out.as_deref()),
        Command::Bench {
            config,
            workers,
            mode,
            seed,
            repeats,
            out,
        } => bench_cmd(&config, workers, mode, seed, repeats, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(BAD_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
