//! Experiment runner behind the `hecto` binary.
//!
//! A training run writes one directory:
//!
//! ```text
//! <out>/config.toml          resolved config echo
//! <out>/seed-<s>/report.json per-epoch numbers, bitwise reproducible
//! <out>/seed-<s>/epochs.csv
//! <out>/seed-<s>/classwise.csv
//! <out>/seed-<s>/timing.json wall-clock only
//! <out>/seed-<s>/model.json  checkpoint
//! <out>/summary.json         seed-averaged numbers
//! <out>/table.csv            accuracy / usage / entropy / time layout
//! <out>/classwise.csv        seed-averaged routing trajectory
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analytics::{
    format_usage, write_atomic, write_csv, write_json, RoutingStats, TaskMetrics,
};
use crate::config::ExperimentConfig;
use crate::diffcore::NamedArray;
use crate::error::{HectoError, Result};
use crate::experts::TaskMode;
use crate::moe::{HectoModel, ModelConfig};
use crate::tasks::{load_jsonl, save_jsonl, Dataset, TaskKind};
use crate::trainer::{evaluate, train, EpochRecord, RunReport, RunTiming};

#[derive(Debug, Parser)]
#[command(name = "hecto", version, about = "Heterogeneous sparse mixture-of-experts experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Named preset the config starts from.
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML config file layered on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `model.gate.tau=2.0`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSONL.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// static, temporal, mixed or regression
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        max_tokens: Option<usize>,
        /// JSONL file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed and write reports.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSONL dataset; defaults to the configured generator.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Model seed; may repeat. Replaces `train.seeds`.
        #[arg(long)]
        seed: Vec<u64>,
        /// Run directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also write the result as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the seed-averaged summary of a run directory.
    Report {
        run_dir: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(HectoError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<HectoError> for CliError {
    fn from(e: HectoError) -> Self {
        CliError::Runtime(e)
    }
}

/// Config problems are the caller's fault.
fn usage(e: HectoError) -> CliError {
    match e {
        HectoError::Config(m) => CliError::Usage(m),
        HectoError::Io { path, source } => CliError::Usage(format!("cannot read {}: {source}", path.display())),
        other => CliError::Runtime(other),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn of(model: &HectoModel) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params.to_named_arrays(),
        }
    }

    pub fn into_model(self) -> Result<HectoModel> {
        let mut model = HectoModel::new(self.config, 0)?;
        model.params.load_named_arrays(&self.params)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HectoError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HectoError::Data(format!("{}: {e}", path.display())))
    }
}

/// Everything one seed produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub report: RunReport,
    pub timing: RunTiming,
    pub model: HectoModel,
}

/// Train and held-out splits for a config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = match &cfg.dataset {
        Some(p) => load_jsonl(Path::new(p), cfg.model.encoder.vocab_size)?,
        None => cfg.task.generate()?,
    };
    if data.is_empty() {
        return Err(HectoError::Data("dataset is empty".into()));
    }
    data.split(cfg.task.held_out)
}

/// Trains every seed in parallel; results come back in seed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let (train_set, held_out) = load_data(cfg)?;
    thread::scope(|s| {
        let handles: Vec<_> = cfg
            .train
            .seeds
            .iter()
            .map(|&seed| {
                let (train_set, held_out) = (&train_set, &held_out);
                s.spawn(move || -> Result<SeedRun> {
                    let mut model = HectoModel::new(cfg.model.clone(), seed)?;
                    let (report, timing) = train(&mut model, train_set, held_out, &cfg.train, seed)?;
                    Ok(SeedRun { report, timing, model })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

pub const EPOCH_HEADER: [&str; 11] = [
    "epoch",
    "train_loss",
    "train_task_loss",
    "accuracy",
    "macro_f1",
    "mse",
    "pearson",
    "entropy_nats",
    "entropy_bits",
    "usage_selected",
    "usage_soft",
];

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
    train_task_loss: f64,
    accuracy: Option<f64>,
    macro_f1: Option<f64>,
    mse: Option<f64>,
    pearson: Option<f64>,
    entropy_nats: f64,
    entropy_bits: f64,
    usage_selected: String,
    usage_soft: String,
}

impl From<&EpochRecord> for EpochRow {
    fn from(e: &EpochRecord) -> Self {
        EpochRow {
            epoch: e.epoch,
            train_loss: e.train_loss,
            train_task_loss: e.train_task_loss,
            accuracy: e.held_out.accuracy,
            macro_f1: e.held_out.macro_f1,
            mse: e.held_out.mse,
            pearson: e.held_out.pearson,
            entropy_nats: e.routing.entropy_nats,
            entropy_bits: e.routing.entropy_bits,
            usage_selected: format_usage(&e.routing.usage.selected),
            usage_soft: format_usage(&e.routing.usage.soft),
        }
    }
}

/// Routing trajectory: one row per (epoch, expert), one column per
/// group, values are mean gate probability in percent.
pub fn classwise_table(per_epoch: &[(usize, &RoutingStats)], experts: &[String]) -> (Vec<String>, Vec<Vec<String>>) {
    let groups: Vec<String> = per_epoch
        .first()
        .map(|(_, r)| r.classwise.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "expert".to_string()];
    header.extend(groups.iter().cloned());
    let mut rows = Vec::new();
    for (epoch, stats) in per_epoch {
        for (k, name) in experts.iter().enumerate() {
            let mut row = vec![epoch.to_string(), format!("E{k} {name}")];
            row.extend(groups.iter().map(|g| format!("{:.2}", 100.0 * stats.classwise[g][k])));
            rows.push(row);
        }
    }
    (header, rows)
}

fn write_rows(header: &[String], rows: &[Vec<String>], path: &Path) -> Result<()> {
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&h, rows, path)
}

pub fn write_seed_run(run: &SeedRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HectoError::io(dir, e))?;
    write_json(&run.report, &dir.join("report.json"))?;
    write_json(&run.timing, &dir.join("timing.json"))?;
    write_json(&Checkpoint::of(&run.model), &dir.join("model.json"))?;
    let rows: Vec<EpochRow> = run.report.epochs.iter().map(EpochRow::from).collect();
    write_csv(&EPOCH_HEADER, &rows, &dir.join("epochs.csv"))?;
    let per_epoch: Vec<_> = run.report.epochs.iter().map(|e| (e.epoch, &e.routing)).collect();
    let (h, r) = classwise_table(&per_epoch, &run.report.experts);
    write_rows(&h, &r, &dir.join("classwise.csv"))
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Spread { mean, std }
    }

    fn of_options(xs: &[Option<f64>]) -> Option<Self> {
        let vals: Option<Vec<f64>> = xs.iter().copied().collect();
        vals.filter(|v| !v.is_empty()).map(|v| Spread::of(&v))
    }

    pub fn display(&self, digits: usize) -> String {
        format!("{:.*} ± {:.*}", digits, self.mean, digits, self.std)
    }
}

/// Final-epoch numbers averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub preset: String,
    pub experts: Vec<String>,
    pub seeds: Vec<u64>,
    pub eval_split: String,
    pub accuracy: Option<Spread>,
    pub macro_f1: Option<Spread>,
    pub mse: Option<Spread>,
    pub pearson: Option<Spread>,
    pub entropy_nats: Spread,
    pub entropy_bits: Spread,
    pub usage_selected: Vec<Spread>,
    pub usage_soft: Vec<Spread>,
}

fn finals(reports: &[RunReport]) -> Result<Vec<&EpochRecord>> {
    reports
        .iter()
        .map(|r| {
            r.epochs
                .last()
                .ok_or_else(|| HectoError::Data(format!("report for seed {} has no epochs", r.seed)))
        })
        .collect()
}

pub fn summarize(preset: &str, reports: &[RunReport]) -> Result<Summary> {
    let first = reports
        .first()
        .ok_or_else(|| HectoError::Data("no seed reports to summarize".into()))?;
    let last = finals(reports)?;
    let metric = |f: fn(&TaskMetrics) -> Option<f64>| {
        Spread::of_options(&last.iter().map(|e| f(&e.held_out)).collect::<Vec<_>>())
    };
    let k = first.experts.len();
    let per_expert = |f: fn(&RoutingStats) -> &Vec<f64>| {
        (0..k)
            .map(|j| Spread::of(&last.iter().map(|e| f(&e.routing)[j]).collect::<Vec<_>>()))
            .collect()
    };
    Ok(Summary {
        preset: preset.to_string(),
        experts: first.experts.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        eval_split: first.eval_split.clone(),
        accuracy: metric(|m| m.accuracy),
        macro_f1: metric(|m| m.macro_f1),
        mse: metric(|m| m.mse),
        pearson: metric(|m| m.pearson),
        entropy_nats: Spread::of(&last.iter().map(|e| e.routing.entropy_nats).collect::<Vec<_>>()),
        entropy_bits: Spread::of(&last.iter().map(|e| e.routing.entropy_bits).collect::<Vec<_>>()),
        usage_selected: per_expert(|r| &r.usage.selected),
        usage_soft: per_expert(|r| &r.usage.soft),
    })
}

pub const TABLE_HEADER: [&str; 5] = ["Model", "Accuracy / F1", "Expert Usage (E0/E1)", "Entropy", "Time"];

/// One row in the accuracy / usage / entropy / time layout.
pub fn table_row(s: &Summary, ms_per_sample: Option<f64>) -> [String; 5] {
    let model = format!("{} ({})", s.experts.join("+"), s.preset);
    let metric = match (s.accuracy, s.macro_f1, s.pearson, s.mse) {
        (Some(a), Some(f), _, _) => format!("{} / {}", a.display(4), f.display(4)),
        (_, _, p, m) => format!(
            "r {} / mse {}",
            p.map_or("undefined".into(), |p| p.display(4)),
            m.map_or("undefined".into(), |m| m.display(4))
        ),
    };
    let usage = format_usage(&s.usage_selected.iter().map(|u| u.mean).collect::<Vec<_>>());
    let entropy = format!("{} bits", s.entropy_bits.display(4));
    let time = ms_per_sample.map_or("n/a".into(), |t| format!("{t:.3} ms/sample"));
    [model, metric, usage, entropy, time]
}

/// Seed-averaged classwise routing per epoch.
fn mean_routing(reports: &[RunReport]) -> Vec<(usize, RoutingStats)> {
    let n = reports.len() as f64;
    let epochs = reports.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|i| {
            let mut stats = reports[0].epochs[i].routing.clone();
            for (grp, row) in stats.classwise.iter_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = reports.iter().map(|r| r.epochs[i].routing.classwise[grp][j]).sum::<f64>() / n;
                }
            }
            (reports[0].epochs[i].epoch, stats)
        })
        .collect()
}

pub fn write_summary(preset: &str, reports: &[RunReport], timings: &[RunTiming], dir: &Path) -> Result<Summary> {
    let summary = summarize(preset, reports)?;
    write_json(&summary, &dir.join("summary.json"))?;
    let ms: Vec<f64> = timings.iter().filter_map(|t| t.eval_ms_per_sample.last().copied()).collect();
    let ms = (!ms.is_empty()).then(|| ms.iter().sum::<f64>() / ms.len() as f64);
    write_csv(&TABLE_HEADER, &[table_row(&summary, ms)], &dir.join("table.csv"))?;
    let mean = mean_routing(reports);
    let per_epoch: Vec<_> = mean.iter().map(|(e, s)| (*e, s)).collect();
    let (h, r) = classwise_table(&per_epoch, &summary.experts);
    write_rows(&h, &r, &dir.join("classwise.csv"))?;
    Ok(summary)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HectoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HectoError::Data(format!("{}: {e}", path.display())))
}

/// Reads every `seed-*` subdirectory of a run, in seed order.
pub fn read_run_dir(run_dir: &Path) -> Result<(String, Vec<RunReport>, Vec<RunTiming>)> {
    let cfg_path = run_dir.join("config.toml");
    let preset = match fs::read_to_string(&cfg_path) {
        Ok(text) => ExperimentConfig::resolve(None, Some(&text), &[])?.preset,
        Err(e) => return Err(HectoError::io(cfg_path, e)),
    };
    let mut dirs: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(|e| HectoError::io(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
        .collect();
    dirs.sort();
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for d in dirs {
        reports.push(read_json::<RunReport>(&d.join("report.json"))?);
        if let Ok(t) = read_json::<RunTiming>(&d.join("timing.json")) {
            timings.push(t);
        }
    }
    if reports.is_empty() {
        return Err(HectoError::Data(format!("no seed-* runs under {}", run_dir.display())));
    }
    reports.sort_by_key(|r| r.seed);
    Ok((preset, reports, timings))
}

fn cmd_gen_data(
    cfg: &ConfigArgs,
    task: Option<&str>,
    n: Option<usize>,
    seed: Option<u64>,
    ratio: Option<f64>,
    max_tokens: Option<usize>,
    out: &Path,
) -> std::result::Result<(), CliError> {
    let mut ec = ExperimentConfig::load(cfg.preset.as_deref(), cfg.config.as_deref(), &cfg.overrides).map_err(usage)?;
    let t = &mut ec.task;
    if let Some(name) = task {
        t.kind = name.parse::<TaskKind>().map_err(usage)?;
    }
    t.n = n.unwrap_or(t.n);
    t.seed = seed.unwrap_or(t.seed);
    t.ratio = ratio.unwrap_or(t.ratio);
    t.max_tokens = max_tokens.unwrap_or(t.max_tokens);
    let data = t.generate().map_err(usage)?;
    save_jsonl(&data, out)?;
    println!("wrote {} {} examples to {}", data.len(), t.kind.name(), out.display());
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, dataset: Option<&Path>, seeds: &[u64], out: &Path) -> std::result::Result<(), CliError> {
    let mut overrides = cfg.overrides.clone();
    if let Some(d) = dataset {
        if !d.exists() {
            return Err(CliError::Usage(format!("dataset {} does not exist", d.display())));
        }
        overrides.push(format!("dataset={}", toml::Value::String(d.display().to_string())));
    }
    if !seeds.is_empty() {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("train.seeds=[{}]", list.join(",")));
    }
    let ec = ExperimentConfig::load(cfg.preset.as_deref(), cfg.config.as_deref(), &overrides).map_err(usage)?;
    if let Some(d) = &ec.dataset {
        if !Path::new(d).exists() {
            return Err(CliError::Usage(format!("dataset {d} does not exist")));
        }
    }
    fs::create_dir_all(out).map_err(|e| HectoError::io(out, e))?;
    write_atomic(&out.join("config.toml"), ec.to_toml()?.as_bytes())?;
    let runs = run_experiment(&ec)?;
    for run in &runs {
        write_seed_run(run, &out.join(format!("seed-{}", run.report.seed)))?;
        let last = run.report.epochs.last().expect("at least one epoch");
        println!(
            "seed {}: {} entropy {:.4} bits usage {}",
            run.report.seed,
            metric_line(&last.held_out),
            last.routing.entropy_bits,
            format_usage(&last.routing.usage.selected)
        );
    }
    let reports: Vec<RunReport> = runs.iter().map(|r| r.report.clone()).collect();
    let timings: Vec<RunTiming> = runs.iter().map(|r| r.timing.clone()).collect();
    write_summary(&ec.preset, &reports, &timings, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn metric_line(m: &TaskMetrics) -> String {
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    match m.accuracy {
        Some(_) => format!("accuracy {} macro-F1 {}", f(m.accuracy), f(m.macro_f1)),
        None => format!("pearson {} mse {}", f(m.pearson), f(m.mse)),
    }
}

#[derive(Serialize)]
struct EvalOutput {
    metrics: TaskMetrics,
    routing: RoutingStats,
}

fn cmd_eval(model: &Path, dataset: &Path, out: Option<&Path>) -> std::result::Result<(), CliError> {
    let model = Checkpoint::load(model)?.into_model()?;
    let data = load_jsonl(dataset, model.config().encoder.vocab_size)?;
    let ev = evaluate(&model, &data)?;
    let classification = matches!(model.config().mode, TaskMode::Classification { .. });
    let groups = crate::analytics::routing_groups(&data, classification);
    let output = EvalOutput {
        metrics: ev.metrics,
        routing: RoutingStats::from_decisions(&ev.decisions, &groups)?,
    };
    print!("{}", crate::analytics::to_json(&output)?);
    if let Some(p) = out {
        write_json(&output, p)?;
    }
    Ok(())
}

fn cmd_report(run_dir: &Path, out: Option<&Path>) -> std::result::Result<(), CliError> {
    let (preset, reports, timings) = read_run_dir(run_dir)?;
    let out = out.unwrap_or(run_dir);
    fs::create_dir_all(out).map_err(|e| HectoError::io(out, e))?;
    let s = write_summary(&preset, &reports, &timings, out)?;
    let ms: Vec<f64> = timings.iter().filter_map(|t| t.eval_ms_per_sample.last().copied()).collect();
    let row = table_row(&s, (!ms.is_empty()).then(|| ms.iter().sum::<f64>() / ms.len() as f64));
    for (h, v) in TABLE_HEADER.iter().zip(row) {
        println!("{h:<22} {v}");
    }
    Ok(())
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::GenData {
            cfg,
            task,
            n,
            seed,
            ratio,
            max_tokens,
            out,
        } => cmd_gen_data(&cfg, task.as_deref(), n, seed, ratio, max_tokens, &out),
        Command::Train { cfg, dataset, seed, out } => cmd_train(&cfg, dataset.as_deref(), &seed, &out),
        Command::Eval { model, dataset, out } => cmd_eval(&model, &dataset, out.as_deref()),
        Command::Report { run_dir, out } => cmd_report(&run_dir, out.as_deref()),
    }
}
