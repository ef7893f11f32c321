//! Command-line workbench: `verify`, `gen`, `train`, `eval`, `export-graph`.
//!
//! Exit codes: 0 success, 1 failed check or divergence, 2 usage or config
//! error, 3 I/O or file-format error.

pub mod config;
pub mod export;
pub mod verify;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{relation_error, score_edges, write_metrics_csv, ScoreMode};
use crate::model::Model;
use crate::synthdata::{self, generate};
use crate::training::{evaluate, train, EpochRecord, EvalMetrics};

use config::RunConfig;
use export::export_graph;
use verify::VerifyOptions;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const BUILD: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "dgp-rtn", version, about = "Deep graph random process / relational thinking network workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the closed forms against numerical oracles and write a CSV report.
    Verify(VerifyArgs),
    /// Generate a synthetic conversation dataset.
    Gen(GenArgs),
    /// Train a model, writing per-epoch metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export the sampled graphs of one conversation window.
    ExportGraph(ExportArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "verify.csv")]
    pub out: PathBuf,
    /// Extra Binomial size for the bound sweep (repeatable).
    #[arg(long = "n")]
    pub sizes: Vec<u64>,
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0x7e02)]
    pub seed: u64,
    /// Shift the closed-form Theorem 1 values (negative control).
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub perturb: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out split evaluated after every epoch.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the training seed; also seeds weight initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Frames,
    Relations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Summary,
    Task,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "frames")]
    pub mode: EvalMode,
    /// Edge score used in relations mode.
    #[arg(long, value_enum, default_value = "summary")]
    pub score: ScoreArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    Dot,
    Json,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub conversation: String,
    /// Last utterance of the window (defaults to the final one).
    #[arg(long)]
    pub window_end: Option<usize>,
    #[arg(long, value_enum, default_value = "dot")]
    pub format: GraphFormat,
    #[arg(long, default_value_t = 64)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub build: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn to_json(v: &impl Serialize) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// `<file>.run.json` beside a single output file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

struct Run {
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                config,
                seed,
                build: BUILD.into(),
                started_unix: now(),
                finished_unix: 0.0,
                outputs: Vec::new(),
            },
        }
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.finished_unix = now();
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        write(path, text)
    }
}

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::NonFinite(_) => EXIT_CHECK,
        Error::Shape { .. } | Error::Contract(_) | Error::Domain(_) | Error::Config(_) => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Verify(a) => cmd_verify(&a),
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExportGraph(a) => cmd_export(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::read)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let mut opts = VerifyOptions {
        pairs: a.pairs,
        seed: a.seed,
        perturb: a.perturb,
        ..VerifyOptions::default()
    };
    for &n in &a.sizes {
        if n == 0 {
            return Err(Error::Config("--n must be positive".into()));
        }
        if !opts.sizes.contains(&n) {
            opts.sizes.push(n);
        }
    }
    let config = serde_json::json!({
        "sizes": opts.sizes, "pairs": opts.pairs, "perturb": opts.perturb,
    });
    let mut run = Run::start("verify", config, Some(a.seed));
    let checks = verify::run(&opts)?;
    verify::write_csv(create(&a.out)?, &checks)?;
    run.manifest.outputs.push(a.out.clone());
    run.finish(&manifest_path(&a.out))?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.pass).collect();
    println!("{} checks, {} failed", checks.len(), failed.len());
    for c in &failed {
        println!("FAIL {} [{}]: expected {}, got {}", c.name, c.inputs, c.expected, c.got);
    }
    Ok(if failed.is_empty() { EXIT_OK } else { EXIT_CHECK })
}

pub fn cmd_gen(a: &GenArgs) -> Result<i32> {
    let mut data = load_config(a.config.as_deref())?.data;
    if let Some(seed) = a.seed {
        data.seed = seed;
    }
    if a.count == 0 {
        return Err(Error::Domain("count must be positive".into()));
    }
    let mut run = Run::start("gen", to_json(&data)?, Some(data.seed));
    let conversations = generate(&data, a.count)?;
    synthdata::save(&a.out, &conversations)?;
    run.manifest.outputs.push(a.out.clone());
    run.finish(&manifest_path(&a.out))?;
    println!("wrote {} conversations to {}", conversations.len(), a.out.display());
    Ok(EXIT_OK)
}

/// Header of the training metrics CSV.
pub const METRIC_COLUMNS: [&str; 16] = [
    "epoch",
    "train_loss",
    "train_ce",
    "train_kl_edges",
    "train_kl_transform",
    "train_total",
    "train_accuracy",
    "test_ce",
    "test_kl_edges",
    "test_kl_transform",
    "test_total",
    "test_accuracy",
    "clamped_fraction",
    "train_frames",
    "test_frames",
    "checkpoint",
];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn metric_row(r: &EpochRecord, ckpt: &str) -> Vec<String> {
    let t = |f: fn(&EvalMetrics) -> f64| opt(r.test.as_ref().map(f));
    vec![
        r.epoch.to_string(),
        opt(r.train_loss),
        r.train.ce.to_string(),
        r.train.kl_edges.to_string(),
        r.train.kl_transform.to_string(),
        r.train.total.to_string(),
        r.train.accuracy.to_string(),
        t(|m| m.ce),
        t(|m| m.kl_edges),
        t(|m| m.kl_transform),
        t(|m| m.total),
        t(|m| m.accuracy),
        opt(r.clamped_fraction),
        r.train.frames.to_string(),
        r.test.as_ref().map_or_else(String::new, |m| m.frames.to_string()),
        ckpt.to_owned(),
    ]
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.json")
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(threads) = a.threads {
        cfg.train.threads = threads;
    }
    cfg.train.validate()?;
    let train_set = synthdata::load(&a.data)?;
    let test_set = a.test.as_deref().map(synthdata::load).transpose()?.unwrap_or_default();
    let ckpt_dir = a.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let seed = cfg.train.seed;
    let mut run = Run::start("train", to_json(&cfg)?, Some(seed));
    let mut model = Model::new(cfg.model.clone(), seed)?;
    for conv in train_set.iter().chain(&test_set) {
        model.check_conversation(conv)?;
    }

    let metrics_path = a.out.join("metrics.csv");
    let mut csv = csv::Writer::from_writer(create(&metrics_path)?);
    let fail = |e: csv::Error| Error::Format(e.to_string());
    csv.write_record(METRIC_COLUMNS).map_err(fail)?;
    let mut written = Vec::new();
    let outcome = train(&mut model, &cfg.train, &train_set, &test_set, |m, r| {
        let name = checkpoint_name(r.epoch);
        let path = ckpt_dir.join(&name);
        checkpoint::save(&path, m, Some(&cfg.train), seed, r.epoch)?;
        written.push(path);
        csv.write_record(metric_row(r, &format!("checkpoints/{name}"))).map_err(fail)?;
        csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let test = r.test.as_ref().map_or_else(String::new, |t| format!(" test ce {:.4} acc {:.4}", t.ce, t.accuracy));
        println!("epoch {:3} train ce {:.4} acc {:.4}{test}", r.epoch, r.train.ce, r.train.accuracy);
        Ok(())
    })?;
    drop(csv);
    run.manifest.outputs.push(metrics_path);
    run.manifest.outputs.extend(written.iter().cloned());
    run.finish(&a.out.join("run.json"))?;
    if let Some(why) = outcome.diverged {
        eprintln!("training diverged: {why}; last good checkpoint is {}", written.last().map_or_else(String::new, |p| p.display().to_string()));
        return Ok(EXIT_CHECK);
    }
    Ok(EXIT_OK)
}

fn load_checked(ckpt: &Path, data: &Path) -> Result<(Model, checkpoint::Manifest, Vec<synthdata::Conversation>)> {
    let (model, manifest) = checkpoint::load(ckpt)?;
    let data = synthdata::load(data)?;
    for conv in &data {
        model.check_conversation(conv)?;
    }
    Ok((model, manifest, data))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let (model, manifest, data) = load_checked(&a.ckpt, &a.data)?;
    let beta = manifest.train.as_ref().map_or_else(|| crate::training::TrainConfig::default().beta, |t| t.beta);
    let config = serde_json::json!({
        "checkpoint": a.ckpt, "data": a.data, "mode": format!("{:?}", a.mode).to_lowercase(),
        "score": format!("{:?}", a.score).to_lowercase(), "beta": beta,
    });
    let mut run = Run::start("eval", config, Some(manifest.seed));
    let rows = match a.mode {
        EvalMode::Frames => {
            let m = evaluate(&model, &data, beta, a.threads)?;
            vec![
                ("ce".to_owned(), m.ce),
                ("kl_edges".into(), m.kl_edges),
                ("kl_transform".into(), m.kl_transform),
                ("total".into(), m.total),
                ("accuracy".into(), m.accuracy),
                ("frames".into(), m.frames as f64),
            ]
        }
        EvalMode::Relations => {
            let mode = match a.score {
                ScoreArg::Summary => ScoreMode::Summary,
                ScoreArg::Task => ScoreMode::Task,
            };
            relation_error(&score_edges(&model, &data, mode, None)?)?.rows()
        }
    };
    write_metrics_csv(create(&a.out)?, &rows)?;
    for (k, v) in &rows {
        println!("{k} {v}");
    }
    run.manifest.outputs.push(a.out.clone());
    run.finish(&manifest_path(&a.out))?;
    Ok(EXIT_OK)
}

pub fn cmd_export(a: &ExportArgs) -> Result<i32> {
    let (model, manifest, data) = load_checked(&a.ckpt, &a.data)?;
    let conv = data
        .iter()
        .find(|c| c.id == a.conversation)
        .ok_or_else(|| Error::Contract(format!("no conversation {:?} in {}", a.conversation, a.data.display())))?;
    let config = serde_json::json!({
        "checkpoint": a.ckpt, "data": a.data, "conversation": a.conversation,
        "window_end": a.window_end, "draws": a.draws, "format": format!("{:?}", a.format).to_lowercase(),
        "model_seed": manifest.seed,
    });
    let mut run = Run::start("export-graph", config, Some(a.seed));
    let graph = export_graph(&model, conv, a.window_end, a.draws, a.seed)?;
    let text = match a.format {
        GraphFormat::Dot => graph.to_dot(),
        GraphFormat::Json => graph.to_json()?,
    };
    write(&a.out, text)?;
    run.manifest.outputs.push(a.out.clone());
    run.finish(&manifest_path(&a.out))?;
    println!("wrote {} nodes and {} edges to {}", graph.nodes.len(), graph.edges.len(), a.out.display());
    Ok(EXIT_OK)
}
