//! The `dbfem` command line.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 on any other
//! failure. Outputs are written only after every computation succeeded.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autograd::OpKind;
use crate::checkpoint::{self, AnyModel};
use crate::config::{Resolved, RunConfig};
use crate::data::{load_dataset, write_synth, DataConfig, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::{run_case, suite_cases, CaseResult, SUITE_TOLERANCE};
use crate::model::{flops_estimate, param_count, Dbfem, InputShape, ModelConfig, Variant};
use crate::tensor::{Precision, Real};
use crate::train::{
    ablation_csv, class_names, evaluate, fit_and_evaluate, fps_benchmark, metrics_from, run_ablation, split_folds,
    ConfusionMatrix, EpochStats, FpsOptions, Metrics, Passthrough, Split, Suite, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "dbfem", version, about = "Dual-branch micro-expression recognition")]
pub struct Cli {
    /// Worker threads for convolution batches. 1 keeps everything on the
    /// calling thread.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset (PGM frames and a manifest).
    Synth(SynthArgs),
    /// Train a model and evaluate it on the held-out split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run an ablation suite.
    Ablate(AblateArgs),
    /// Measure single-image throughput of every variant.
    Bench(BenchArgs),
    /// Finite-difference check of every op, block and the desk network.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration; only its `[synth]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// holdout_stratified or loso.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if let Some(s) = self.split {
            cfg.split = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// table5 or table7.
    #[arg(long)]
    pub suite: Option<Suite>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Timed forwards per row for the fps column; 0 leaves it empty so the
    /// CSV is reproducible.
    #[arg(long, default_value_t = 0)]
    pub fps_iters: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Also write `bench.json` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random points per case.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub h: f64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<OpKind>,
}

/// Parses `std::env::args`, runs the command and maps the outcome to an
/// exit status.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    if cli.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads as usize)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        crate::set_parallel(true);
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(&a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(&a).map(|_| ExitCode::SUCCESS),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ExitCode::SUCCESS),
        Command::Bench(a) => cmd_bench(&a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn data_path(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Error::InvalidArgument("no dataset given (use --data or set `data` in the config)".into()))
}

/// Files are collected in memory and written together at the end.
struct Outputs {
    dir: PathBuf,
    files: Vec<(&'static str, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &'static str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name, bytes.into()));
    }

    fn json(&mut self, name: &'static str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    fn write(self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for (name, bytes) in self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let n = a.n as usize;
    ensure_writable(&a.out)?;
    let manifest = write_synth(&a.out, n, seed, &cfg.synth)?;
    let mut resolved = Resolved::new("synth");
    resolved.samples = Some(n);
    resolved.seed = Some(seed);
    resolved.synth = Some(&cfg.synth);
    let mut out = Outputs::new(&a.out);
    out.add("config.resolved", resolved.to_toml()?);
    out.write()?;
    println!("wrote {n} samples to {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    seed: u64,
    data: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    params: u64,
    folds: usize,
    first_batch_loss: Option<f64>,
    train_accuracy: f64,
    history: &'a [EpochStats],
    class_names: Vec<&'static str>,
    confusion: Vec<Vec<u64>>,
    metrics: Metrics,
}

fn confusion_csv(cm: &ConfusionMatrix) -> Result<String> {
    cm.to_csv(&class_names())
}

fn train_typed<T: Real>(cfg: &RunConfig, data_path: &Path, data: &[Sample], out_dir: &Path) -> Result<()> {
    let run = fit_and_evaluate::<T>(&cfg.model, &cfg.train, data)?;
    let folds = split_folds(data, &cfg.train)?;
    let last = folds.last().expect("at least one fold");
    let train_part: Vec<Sample> = last.train.iter().map(|&i| data[i].clone()).collect();
    let train_metrics = metrics_from(&evaluate(&run.model, &train_part)?)?;

    let mut resolved = Resolved::new("train");
    resolved.data = Some(data_path.to_path_buf());
    resolved.model = Some(&cfg.model);
    resolved.train = Some(&cfg.train);
    let report = RunReport {
        seed: cfg.train.seed,
        data: data_path,
        model: &cfg.model,
        train: &cfg.train,
        params: run.model.param_count(),
        folds: folds.len(),
        first_batch_loss: run.first_batch_loss,
        train_accuracy: train_metrics.accuracy,
        history: &run.history,
        class_names: class_names(),
        confusion: run.confusion.rows(),
        metrics: run.metrics,
    };
    let mut out = Outputs::new(out_dir);
    out.add("config.resolved", resolved.to_toml()?);
    out.add("checkpoint", checkpoint::to_bytes(&run.model)?);
    out.json("history.json", &run.history)?;
    out.json("metrics.json", &report)?;
    out.add("confusion.csv", confusion_csv(&run.confusion)?);
    out.write()?;
    println!(
        "{}: train accuracy {:.4}, test accuracy {:.4}, UF1 {:.4}, UAR {:.4}",
        cfg.model.variant, train_metrics.accuracy, run.metrics.accuracy, run.metrics.uf1, run.metrics.uar
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg.train);
    cfg.train.validate()?;
    let path = data_path(a.data.as_deref(), &cfg)?;
    ensure_writable(&a.out)?;
    let data = load_dataset(&path, &DataConfig::for_model(&cfg.model))?;
    match cfg.train.precision {
        Precision::Single => train_typed::<f32>(&cfg, &path, &data, &a.out),
        Precision::Double => train_typed::<f64>(&cfg, &path, &data, &a.out),
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    model: &'a ModelConfig,
    samples: usize,
    class_names: Vec<&'static str>,
    confusion: Vec<Vec<u64>>,
    metrics: Metrics,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let config = model.config().clone();
    ensure_writable(&a.out)?;
    let data = load_dataset(&a.data, &DataConfig::for_model(&config))?;
    let cm = match &model {
        AnyModel::Single(m) => evaluate(m, &data)?,
        AnyModel::Double(m) => evaluate(m, &data)?,
    };
    let metrics = metrics_from(&cm)?;
    let mut resolved = Resolved::new("eval");
    resolved.data = Some(a.data.clone());
    resolved.model = Some(&config);
    let mut out = Outputs::new(&a.out);
    out.add("config.resolved", resolved.to_toml()?);
    out.json(
        "metrics.json",
        &EvalReport {
            checkpoint: &a.checkpoint,
            data: &a.data,
            model: &config,
            samples: data.len(),
            class_names: class_names(),
            confusion: cm.rows(),
            metrics,
        },
    )?;
    out.add("confusion.csv", confusion_csv(&cm)?);
    out.write()?;
    println!(
        "{} samples: accuracy {:.4}, UF1 {:.4}, UAR {:.4}",
        data.len(),
        metrics.accuracy,
        metrics.uf1,
        metrics.uar
    );
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg.train);
    cfg.train.validate()?;
    let suite = a
        .suite
        .or(cfg.suite)
        .ok_or_else(|| Error::InvalidArgument("no suite given (use --suite table5 or --suite table7)".into()))?;
    let fps = FpsOptions {
        warmup: if a.fps_iters > 0 { 3 } else { 0 },
        iters: a.fps_iters,
    };
    if fps.iters > 0 && fps.iters < 10 {
        return Err(Error::InvalidArgument(format!(
            "--fps-iters must be 0 or at least 10, got {}",
            fps.iters
        )));
    }
    let path = data_path(a.data.as_deref(), &cfg)?;
    ensure_writable(&a.out)?;
    let data = load_dataset(&path, &DataConfig::for_model(&cfg.model))?;
    let report = match cfg.train.precision {
        Precision::Single => run_ablation::<f32>(suite, &cfg.model, &cfg.train, &data, fps)?,
        Precision::Double => run_ablation::<f64>(suite, &cfg.model, &cfg.train, &data, fps)?,
    };
    let mut resolved = Resolved::new("ablate");
    resolved.data = Some(path);
    resolved.suite = Some(suite);
    resolved.model = Some(&cfg.model);
    resolved.train = Some(&cfg.train);
    let mut out = Outputs::new(&a.out);
    out.add("config.resolved", resolved.to_toml()?);
    let csv = ablation_csv(&report.rows)?;
    out.add("ablation.csv", csv.clone());
    out.json("ablation.json", &report)?;
    out.write()?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    variant: String,
    params: u64,
    macs: u64,
    fps: f64,
    median_seconds: f64,
}

fn bench_typed<T: Real>(base: &ModelConfig, warmup: usize, iters: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let cfg = base.with_variant(v);
        let model = Dbfem::<T>::new(&cfg, 0)?;
        let r = fps_benchmark(&model, warmup, iters)?;
        rows.push(BenchRow {
            variant: v.table_label().to_string(),
            params: param_count(&cfg)?,
            macs: flops_estimate(&cfg, &InputShape::of(&cfg))?,
            fps: r.fps,
            median_seconds: r.median_seconds,
        });
    }
    let shape = InputShape::of(base);
    let r = fps_benchmark::<T>(
        &Passthrough {
            shape,
            classes: base.num_classes,
        },
        warmup,
        iters,
    )?;
    rows.push(BenchRow {
        variant: "passthrough".into(),
        params: 0,
        macs: 0,
        fps: r.fps,
        median_seconds: r.median_seconds,
    });
    Ok(rows)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let precision = a.precision.unwrap_or(cfg.train.precision);
    let rows = match precision {
        Precision::Single => bench_typed::<f32>(&cfg.model, a.warmup, a.iters)?,
        Precision::Double => bench_typed::<f64>(&cfg.model, a.warmup, a.iters)?,
    };
    println!("{:<16} {:>12} {:>14} {:>12}", "variant", "params", "macs", "fps");
    for r in &rows {
        println!("{:<16} {:>12} {:>14} {:>12.2}", r.variant, r.params, r.macs, r.fps);
    }
    if let Some(dir) = &a.out {
        let mut resolved = Resolved::new("bench");
        resolved.model = Some(&cfg.model);
        let mut out = Outputs::new(dir);
        out.add("config.resolved", resolved.to_toml()?);
        out.json("bench.json", &rows)?;
        out.write()?;
    }
    Ok(())
}

/// Runs the whole suite and prints one line per case. Returns the results
/// in suite order.
pub fn gradcheck_results(a: &GradcheckArgs) -> Result<Vec<CaseResult>> {
    suite_cases(a.points, a.seed)?
        .iter()
        .map(|case| run_case(case, a.h, a.inject_fault))
        .collect()
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let results = gradcheck_results(a)?;
    println!(
        "{:<24} {:>8} {:>8} {:>12}  status",
        "case", "checked", "skipped", "max rel err"
    );
    for r in &results {
        let status = if r.passed(SUITE_TOLERANCE) { "ok" } else { "FAIL" };
        println!(
            "{:<24} {:>8} {:>8} {:>12.3e}  {status}",
            r.name, r.checked, r.skipped, r.max_rel_error
        );
    }
    let worst = results
        .iter()
        .max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error))
        .expect("suite is not empty");
    if results.iter().all(|r| r.passed(SUITE_TOLERANCE)) {
        println!(
            "all {} cases passed (worst {} at {:.3e})",
            results.len(),
            worst.name,
            worst.max_rel_error
        );
        Ok(ExitCode::SUCCESS)
    } else {
        let failed: Vec<String> = results
            .iter()
            .filter(|r| !r.passed(SUITE_TOLERANCE))
            .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_error))
            .collect();
        eprintln!(
            "gradient check failed: {}; worst: {} with relative error {:.3e}",
            failed.join(", "),
            worst.name,
            worst.max_rel_error
        );
        Ok(ExitCode::FAILURE)
    }
}
