//! `echl` command line. Exit codes: 0 success, 2 usage error, 1 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::calibrate::TempMode;
use crate::error::Error;
use crate::graphstore::{generate_synthetic, load_dataset, Aggr, Split, SynthSpec};
use crate::labelcorr::{correlation_stats, CoocVariant};
use crate::models::{EdgeScalarKind, ModelConfig, ModelKind, NormKind};
use crate::posthoc::{run_posthoc, LambdaChoice, PosthocConfig};
use crate::report;
use crate::trainer::artifact::{logits_file, read_json, LogitsTable, RunArtifact, METRICS_FILE};
use crate::trainer::{evaluate_split, table_metrics, train, TrainConfig};

pub const NODES_FILE: &str = "nodes.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const THREADS_ENV: &str = "ECHL_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "echl", version, about = "Edge-aware multi-label node classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic species-split dataset (nodes.tsv, edges.tsv).
    Synth(SynthArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Recompute metrics from a run directory's stored logits.
    Eval(EvalArgs),
    /// Fit temperatures, thresholds and optional label smoothing on a run.
    Calibrate(CalibrateArgs),
    /// Aggregate run directories into a CSV table and an SVG scatter.
    Report(ReportArgs),
    /// Convert an ECHL logits table to CSV.
    Export(ExportArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn dropout_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

fn nonneg(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be finite and nonnegative"))
    }
}

fn nonneg_or_inf(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be nonnegative"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn lambda_choice(s: &str) -> Result<LambdaChoice, String> {
    if s == "tune" {
        return Ok(LambdaChoice::Tune);
    }
    nonneg(s).map(LambdaChoice::Fixed)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(3..))]
    pub species: u64,
    #[arg(long = "nodes-per", default_value_t = 500, value_parser = clap::value_parser!(u64).range(2..))]
    pub nodes_per: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub labels: u64,
    #[arg(long, default_value_t = 0.8, value_parser = unit_interval)]
    pub signal: f64,
    #[arg(long, default_value_t = 0.2, value_parser = unit_interval)]
    pub noise: f64,
    #[arg(long = "avg-degree", default_value_t = 10.0, value_parser = nonneg)]
    pub avg_degree: f64,
    /// Probability that an edge channel reports label overlap.
    #[arg(long = "evidence-rate", default_value_t = 0.3, value_parser = unit_interval)]
    pub evidence_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory for nodes.tsv and edges.tsv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding nodes.tsv and edges.tsv.
    #[arg(long, conflicts_with_all = ["nodes", "edges"], required_unless_present_all = ["nodes", "edges"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "edges")]
    pub nodes: Option<PathBuf>,
    #[arg(long, requires = "nodes")]
    pub edges: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> (PathBuf, PathBuf) {
        match &self.data {
            Some(d) => (d.join(NODES_FILE), d.join(EDGES_FILE)),
            None => (self.nodes.clone().unwrap(), self.edges.clone().unwrap()),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = ModelKind::Sage)]
    pub model: ModelKind,
    #[arg(long, value_enum, default_value_t = NormKind::Bn)]
    pub norm: NormKind,
    #[arg(long = "x-aggr", value_enum, default_value_t = Aggr::Sum)]
    pub x_aggr: Aggr,
    #[arg(long = "edge-scalar", value_enum, default_value_t = EdgeScalarKind::Sum)]
    pub edge_scalar: EdgeScalarKind,
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
    pub hid: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub layers: u64,
    #[arg(long, default_value_t = 0.1, value_parser = dropout_rate)]
    pub dropout: f64,
    #[arg(long, default_value_t = 2e-3, value_parser = nonneg)]
    pub lr: f64,
    #[arg(long, default_value_t = 120, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    pub patience: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "eval-every", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub eval_every: u64,
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a nonempty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Split to evaluate; all stored splits when omitted.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value_t = TempMode::PerLabel)]
    pub mode: TempMode,
    #[arg(long, default_value_t = 1.0, value_parser = nonneg_or_inf)]
    pub l2: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub beta: f64,
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    /// Smoothing strength, or `tune` to pick from the validation grid.
    #[arg(long = "smooth-lambda", value_parser = lambda_choice)]
    pub smooth_lambda: Option<LambdaChoice>,
    #[arg(long = "cooc-variant", value_enum, default_value_t = CoocVariant::ConditionalCentered)]
    pub cooc_variant: CoocVariant,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (each holding args.json and metrics.json).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// ECHL file, or a run directory together with --split.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn write_json(path: &Path, v: &Value) -> CliResult {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let spec = SynthSpec {
        num_species: a.species as usize,
        nodes_per_species: a.nodes_per as usize,
        num_labels: a.labels as usize,
        avg_degree: a.avg_degree,
        signal: a.signal,
        noise: a.noise,
        evidence_rate: a.evidence_rate,
    };
    let g = generate_synthetic(&spec, a.seed)?;
    fs::create_dir_all(&a.out)?;
    g.write_tsv(&a.out.join(NODES_FILE), &a.out.join(EDGES_FILE))?;
    writeln!(out, "wrote {} nodes, {} edges, K = {} to {}", g.num_nodes(), g.num_edges(), g.num_labels(), a.out.display())?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() && !a.force {
        return Err(CliError::Usage(format!("{} is not empty; pass --force to overwrite", a.out.display())));
    }
    let (nodes, edges) = a.data.paths();
    let g = load_dataset(&nodes, &edges)?;
    g.check_species_split()?;
    let cfg = ModelConfig {
        kind: a.model,
        norm: a.norm,
        layers: a.layers as usize,
        hidden: a.hid as usize,
        dropout: a.dropout,
        edge_scalar: a.edge_scalar,
        x_aggr: a.x_aggr,
        k: g.num_labels(),
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs as usize,
        patience: a.patience as usize,
        seed: a.seed,
        eval_every: a.eval_every as usize,
        ece_bins: a.bins as usize,
        out_dir: Some(a.out.clone()),
    };
    let mut run = train(&g, &cfg, &tcfg)?.artifact;
    run.args.insert("nodes".into(), json!(nodes));
    run.args.insert("edges".into(), json!(edges));
    if let Some(d) = &a.data.data {
        run.args.insert("data".into(), json!(d));
    }
    run.args.insert("out".into(), json!(a.out));
    run.args.insert("force".into(), json!(a.force));
    run.args.insert("bins".into(), json!(a.bins));
    run.write(&a.out)?;
    let m = &run.metrics;
    writeln!(
        out,
        "{}: val_auc {} test_auc {} test_f1_05 {} params {} best_epoch {}",
        a.out.display(),
        m["val_auc"],
        m["test_auc"],
        m["test_f1_05"],
        m["params"],
        m["best_epoch"]
    )?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let run = RunArtifact::load(&a.run)?;
    let doc = match a.split {
        Some(split) => {
            let s = evaluate_split(run.table(split)?, a.bins as usize)?;
            serde_json::to_value(s).map_err(Error::from)?
        }
        None => {
            let m = table_metrics(&run.tables, a.bins as usize)?;
            let stored = read_json(&a.run.join(METRICS_FILE))?;
            let mismatched: Vec<&String> = m.keys().filter(|k| stored.get(*k) != m.get(*k)).collect();
            let mut doc = Map::new();
            doc.insert("metrics".into(), Value::Object(m.clone()));
            doc.insert("matches_metrics_json".into(), json!(mismatched.is_empty()));
            if !mismatched.is_empty() {
                doc.insert("mismatched_keys".into(), json!(mismatched));
            }
            Value::Object(doc)
        }
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&doc).map_err(Error::from)?)?;
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs, out: &mut dyn Write) -> CliResult {
    let run = RunArtifact::load(&a.run)?;
    let train_t = run.table(Split::Train)?;
    let val = run.table(Split::Valid)?.to_eval_table();
    let test = run.table(Split::Test)?.to_eval_table();
    let cfg = PosthocConfig {
        mode: a.mode,
        l2: a.l2,
        beta: a.beta,
        bins: a.bins as usize,
        smoothing: a.smooth_lambda,
        variant: a.cooc_variant,
    };
    let splits = vec![Split::Train; train_t.rows()];
    let res = run_posthoc(&train_t.labels, &splits, &val, &test, &cfg)?;
    res.calibration.save(&a.run.join("calibration.json"))?;
    let mut metrics = res.metrics;
    if let Some(p) = &res.cooc {
        p.save(&a.run.join("cooc.csv"), &a.run.join("cooc.json"))?;
        let stats = serde_json::to_value(correlation_stats(p)).map_err(Error::from)?;
        if let Value::Object(s) = stats {
            for (k, v) in s {
                metrics.insert(format!("cooc_{k}"), v);
            }
        }
    }
    write_json(&a.run.join("posthoc_metrics.json"), &Value::Object(metrics.clone()))?;
    writeln!(
        out,
        "T_global {:.4} lambda {} | val f1@0.5 {} -> tuned {} | test f1@0.5 {} -> tuned {} | test ece {} -> {}",
        res.calibration.t_global,
        res.lambda,
        metrics["val_f1_05_raw"],
        metrics["val_f1_tuned"],
        metrics["test_f1_05_raw"],
        metrics["test_f1_tuned"],
        metrics["test_ece_raw"],
        metrics["test_ece"]
    )?;
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> CliResult {
    let runs = a
        .runs
        .iter()
        .map(|d| report::RunSummary::load(d))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = report::aggregate(&runs)?;
    fs::write(&a.csv, report::to_csv(&rows))?;
    if let Some(svg) = &a.svg {
        fs::write(svg, report::to_svg(&rows))?;
    }
    writeln!(out, "{} runs in {} configurations -> {}", runs.len(), rows.len(), a.csv.display())?;
    Ok(())
}

fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> CliResult {
    let path = if a.input.is_dir() {
        let split = a
            .split
            .ok_or_else(|| CliError::Usage("--split is required when --input is a run directory".into()))?;
        a.input.join(logits_file(split))
    } else {
        a.input.clone()
    };
    let t = LogitsTable::read_echl(&path)?;
    fs::write(&a.out, t.to_csv())?;
    writeln!(out, "{} rows x {} labels -> {}", t.rows(), t.num_labels(), a.out.display())?;
    Ok(())
}

fn configure_threads() -> CliResult {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // A pool may already exist when called in-process more than once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Calibrate(a) => cmd_calibrate(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Export(a) => cmd_export(a, out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let _ = match &e {
                CliError::Usage(m) => writeln!(err, "usage error: {m}"),
                CliError::Runtime(r) => writeln!(err, "error: {r}"),
            };
            code
        }
    }
}
