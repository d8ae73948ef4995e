//! Command-line front end. Structured results go to stdout as JSON (CSV for
//! metrics files), progress to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::chargraph::conv_cost_ratio;
use crate::coarsen::PoolMode;
use crate::error::{Result, SgcnError};
use crate::gradsuite::run_suite;
use crate::ink::{load_jsonl, read_records, save_jsonl, synth_split, Dataset, SynthSpec, Trajectory};
use crate::network::{FeatureMode, ModelConfig, SgcnModel};
use crate::serve::{serve, top_predictions, Prediction, Recognizer, DEFAULT_PORT};
use crate::trainer::{
    evaluate, load_model, metrics_csv, split_dataset, Checkpoint, GraphSet, TrainConfig, Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Caps the rayon pool size.
pub const WORKERS_ENV: &str = "SGCN_NUM_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "sgcn", version, about = "Online handwritten character recognition with spline graph convolutions")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Write a synthetic digit dataset as JSONL.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Print evaluation metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print top-k predictions for every sample of a JSONL file.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Compare image and graph convolution cost.
    Cost(CostArgs),
    /// Serve the recognizer over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output JSONL path; `classes.json` is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Optional held-out file drawn from the same stream.
    #[arg(long, requires = "test_per_class")]
    pub test_out: Option<PathBuf>,
    #[arg(long, requires = "test_out")]
    pub test_per_class: Option<usize>,
    #[arg(long, default_value_t = SynthSpec::default().jitter)]
    pub jitter: f64,
    /// Maximum rotation in radians.
    #[arg(long, default_value_t = SynthSpec::default().rotation_range)]
    pub rotation: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Small,
    Large,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model config JSON; overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "small")]
    pub preset: Preset,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long, value_enum)]
    pub features: Option<FeatureArg>,
    /// Link consecutive strokes with an edge.
    #[arg(long)]
    pub penup_edges: Option<bool>,
    /// Resampling spacing on the unit square.
    #[arg(long)]
    pub interval: Option<f64>,
    /// Cosine logit scale.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Cosine margin.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long, value_enum)]
    pub pool_mode: Option<PoolArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FeatureArg {
    Full,
    Constant,
    Spatial,
    Temporal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolArg {
    Max,
    Mean,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training JSONL.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation JSONL; without it a seeded share of `--data` is held out.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue the run stored in this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    /// Write zero in the `seconds` column for byte-identical reruns.
    #[arg(long)]
    pub no_timing: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// JSONL samples; labels are optional.
    pub file: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    pub height: u64,
    pub width: u64,
    pub nodes: u64,
    /// Average neighbors per node.
    pub edges: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Directory of the UI bundle served under `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| SgcnError::invalid(format!("{WORKERS_ENV}={v} is not a positive integer")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(&a, seed),
        Command::Train(a) => train(&a, seed),
        Command::Eval(a) => eval(&a),
        Command::Infer(a) => infer(&a),
        Command::Gradcheck => gradcheck(seed),
        Command::Cost(a) => print_json(&conv_cost_ratio(a.height, a.width, a.nodes, a.edges)?),
        Command::Serve(a) => serve_cmd(&a),
    }
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        jitter: a.jitter,
        rotation_range: a.rotation,
        ..SynthSpec::default()
    };
    let (train, test) = synth_split(&spec, a.per_class, a.test_per_class.unwrap_or(0), seed)?;
    save_jsonl(&train, &a.out)?;
    if let Some(p) = &a.test_out {
        save_jsonl(&test, p)?;
    }
    print_json(&serde_json::json!({
        "out": a.out,
        "samples": train.len(),
        "test_out": a.test_out,
        "test_samples": a.test_out.as_ref().map(|_| test.len()),
        "classes": a.classes,
        "seed": seed,
    }))
}

fn model_config(a: &ModelArgs, class_names: Vec<String>) -> Result<ModelConfig> {
    let mut c = match &a.config {
        Some(p) => serde_json::from_str::<ModelConfig>(&std::fs::read_to_string(p)?)?,
        None => match a.preset {
            Preset::Small => ModelConfig::small(class_names.len()),
            Preset::Large => ModelConfig::large(class_names.len()),
        },
    };
    if a.config.is_none() || c.class_names.is_empty() {
        c = c.with_class_names(class_names);
    }
    if let Some(v) = a.width {
        c.width_multiplier = v;
    }
    if let Some(f) = a.features {
        c.features = match f {
            FeatureArg::Full => FeatureMode::Full,
            FeatureArg::Constant => FeatureMode::Constant,
            FeatureArg::Spatial => FeatureMode::Spatial,
            FeatureArg::Temporal => FeatureMode::Temporal,
        };
    }
    if let Some(p) = a.pool_mode {
        c.pool_mode = match p {
            PoolArg::Max => PoolMode::Max,
            PoolArg::Mean => PoolMode::Mean,
        };
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { c.$f = v; } )* };
    }
    set!(penup_edges, interval, sigma, margin, dropout, kernel_size, degree);
    c.validate()?;
    Ok(c)
}

fn class_names(c: &ModelConfig) -> Vec<String> {
    (0..c.num_classes).map(|k| c.class_name(k)).collect()
}

fn train_config(a: &TrainArgs, base: TrainConfig) -> TrainConfig {
    let mut t = base;
    macro_rules! set {
        ($($f:ident => $g:ident),*) => { $( if let Some(v) = a.$f { t.$g = v; } )* };
    }
    set!(epochs => max_epochs, batch_size => batch_size, lr => lr, decay => decay,
         patience => patience, min_lr => min_lr, eval_fraction => eval_fraction);
    if a.no_timing {
        t.record_time = false;
    }
    t
}

fn write_metrics(path: &Path, trainer: &Trainer) -> Result<()> {
    std::fs::write(path, metrics_csv(&trainer.state.history))?;
    Ok(())
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let data = load_jsonl(&a.data)?;
    if data.is_empty() {
        return Err(SgcnError::invalid(format!("{}: empty dataset", a.data.display())));
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let stored = Trainer::from_checkpoint(&ck, None)?;
            let config = train_config(a, stored.config.clone());
            Trainer::from_checkpoint(&ck, Some(config))?
        }
        None => {
            let mc = model_config(&a.model, data.class_names.clone())?;
            let tc = train_config(a, TrainConfig { seed, ..TrainConfig::default() });
            Trainer::new(SgcnModel::new(mc, seed)?, tc)?
        }
    };
    let names = class_names(&trainer.model.config);
    let data = data.relabel(&names)?;
    let (train_ds, eval_ds): (Dataset, Dataset) = match &a.test {
        Some(p) => (data, load_jsonl(p)?.relabel(&names)?),
        None => split_dataset(&data, trainer.config.eval_fraction, trainer.config.seed)?,
    };
    let cfg = trainer.model.config.clone();
    let train_set = GraphSet::from_dataset(&train_ds, &cfg)?;
    let eval_set = GraphSet::from_dataset(&eval_ds, &cfg)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.checkpoint.with_extension("csv"));
    eprintln!(
        "training on {} samples, evaluating on {}, {} parameters",
        train_set.len(),
        eval_set.len(),
        trainer.model.param_count().num_params
    );
    trainer.fit(&train_set, &eval_set, |t| {
        let r = t.state.history.last().expect("an epoch just finished");
        eprintln!(
            "epoch {:>3}  loss {:.4}  top1 {:.4}  lr {}  {:.1}s",
            r.epoch, r.loss, r.top1, r.lr, r.seconds
        );
        t.checkpoint()?.save(&a.checkpoint)?;
        write_metrics(&metrics, t)
    })?;
    // also covers a resumed run that had nothing left to do
    trainer.checkpoint()?.save(&a.checkpoint)?;
    write_metrics(&metrics, &trainer)?;
    print_json(&serde_json::json!({
        "checkpoint": a.checkpoint,
        "metrics": metrics,
        "epochs": trainer.state.epoch,
        "best_top1": trainer.state.best_top1,
        "final_lr": trainer.state.lr,
        "converged": trainer.state.converged,
        "params": trainer.model.param_count(),
    }))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model: SgcnModel<f32> = load_model(&a.checkpoint)?;
    let data = load_jsonl(&a.data)?.relabel(&class_names(&model.config))?;
    let set = GraphSet::from_dataset(&data, &model.config)?;
    print_json(&evaluate(&model, &set, a.batch_size, a.topk)?)
}

#[derive(Serialize)]
struct InferLine {
    id: String,
    predictions: Vec<Prediction>,
}

fn infer(a: &InferArgs) -> Result<()> {
    let model: SgcnModel<f32> = load_model(&a.checkpoint)?;
    let records = read_records(&a.file)?;
    let mut lines = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let at_line = |e: SgcnError| SgcnError::MalformedLine {
            path: a.file.clone(),
            line,
            message: e.to_string(),
        };
        let traj = Trajectory::new(rec.strokes).map_err(at_line)?;
        let (predictions, _) = top_predictions(&model, &traj, a.topk).map_err(at_line)?;
        lines.push(InferLine {
            id: rec.id.unwrap_or_else(|| format!("line-{line}")),
            predictions,
        });
    }
    for l in &lines {
        print_json(l)?;
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let entries = run_suite(seed)?;
    let passed = entries.iter().all(|e| e.passed);
    print_json(&serde_json::json!({ "passed": passed, "checks": entries }))?;
    if passed {
        Ok(())
    } else {
        Err(SgcnError::Gradcheck("tolerance exceeded".into()))
    }
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let mut r = Recognizer::load(&a.checkpoint)?;
    r.static_dir = a.static_dir.clone();
    eprintln!(
        "checkpoint {} ({} classes, id {})",
        a.checkpoint.display(),
        r.num_classes(),
        r.checkpoint_id
    );
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(Arc::new(r), SocketAddr::new(a.host, a.port)))
}
