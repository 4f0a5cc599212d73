mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tokenctl::attention::{diag_dominance, format_matrix, Modality};
use tokenctl::checkpoint::{write_atomic, Checkpoint};
use tokenctl::compare::{compare_integrations, compare_positions};
use tokenctl::eval::{self, evaluate, held_out, EvalSettings};
use tokenctl::flow::{sample, train_with, TrainTarget};
use tokenctl::model::{Dit, ForwardInput, Integration, ModelConfig};
use tokenctl::tasks::{Dataset, Mixture, TaskKind};
use tokenctl::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "tokenctl", version, about = "Train and probe token-conditioned toy diffusion transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CompareMode {
    Integration,
    Position,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    EdgeToImage,
    Colorization,
    SubjectRelocation,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::EdgeToImage => TaskKind::EdgeToImage,
            Task::Colorization => TaskKind::Colorization,
            Task::SubjectRelocation => TaskKind::SubjectRelocation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model (`train.target = "base"`) or adapters on a base checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint for adapter training; overrides `base` in the config.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score samples on held-out pairs; prints metrics JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the task the checkpoint was trained on.
        #[arg(long, value_enum)]
        task: Option<Task>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample one held-out pair and write condition, target and sample as PPM.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: Option<Task>,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Paired training runs: integration strategies or position policies.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: CompareMode,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Export image/condition attention blocks for one layer and head.
    InspectAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: Option<Task>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        /// Flow time of the probe input.
        #[arg(long, default_value_t = eval::PROBE_T)]
        t: f64,
    },
    /// Adapter and base parameter counts for the configured model.
    CountParams {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) | Error::Domain(_) | Error::Policy(_) | Error::Json(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(g) = common.gamma {
        cfg.gamma = g;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    write_atomic(&cfg.out.join("config.json"), cfg.to_json()?.as_bytes())?;
    Ok(())
}

fn write_metadata(dir: &Path, started: Instant, extra: serde_json::Value) -> CliResult<()> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "finished_unix": now,
        "elapsed_secs": started.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
        "extra": extra,
    });
    write_atomic(&dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

fn load_base(path: Option<&PathBuf>) -> CliResult<Dit> {
    let path = path.ok_or_else(|| Failure::Config("adapter training needs a base checkpoint (`base` or --base)".into()))?;
    Ok(Checkpoint::load(path)?.model()?)
}

fn checkpoint_task(ck: &Checkpoint) -> Option<TaskKind> {
    serde_json::from_value(ck.header.metadata.get("task")?.clone()).ok()
}

/// Loads a checkpoint and picks the task, rejecting a mismatch with the one
/// it was trained on.
fn load_for_task(path: &Path, task: Option<Task>) -> CliResult<(Dit, TaskKind, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let trained = checkpoint_task(&ck);
    let task = match (task.map(TaskKind::from), trained) {
        (Some(t), Some(tr)) if t != tr && ck.header.model.integration != Integration::None => {
            return Err(Failure::Config(format!("checkpoint was trained on {tr:?}, not {t:?}")));
        }
        (Some(t), _) => t,
        (None, Some(tr)) => tr,
        (None, None) => return Err(Failure::Config("checkpoint has no task; pass --task".into())),
    };
    Ok((ck.model()?, task, ck))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train { common, base, steps, lr } => {
            let mut cfg = resolve(&common)?;
            if base.is_some() {
                cfg.base = base;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            cfg.train.seed = cfg.seed;
            cmd_train(&cfg)
        }
        Command::Eval { common, checkpoint, task, n, steps } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = n {
                cfg.eval.n = n;
            }
            if let Some(s) = steps {
                cfg.eval.n_steps = s;
            }
            cfg.validate()?;
            let (model, task, _) = load_for_task(&checkpoint, task)?;
            let ds = Dataset::new(task, cfg.data_seed);
            let report = evaluate(
                &model,
                &ds,
                &EvalSettings { n: cfg.eval.n, gamma: cfg.gamma, n_steps: cfg.eval.n_steps, seed: cfg.seed },
            )?;
            let text = serde_json::to_string_pretty(&report)?;
            match &common.out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    write_atomic(&dir.join("metrics.json"), text.as_bytes())?;
                }
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Sample { common, checkpoint, task, index, steps } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = steps {
                cfg.eval.n_steps = s;
            }
            cfg.validate()?;
            let (model, task, _) = load_for_task(&checkpoint, task)?;
            let pair = held_out(&Dataset::new(task, cfg.data_seed), index);
            let img = sample(&model, &pair.text, Some(&pair.condition), cfg.gamma, cfg.eval.n_steps, cfg.seed)?;
            fs::create_dir_all(&cfg.out)?;
            write_atomic(&cfg.out.join("condition.ppm"), pair.condition.to_ppm().as_bytes())?;
            write_atomic(&cfg.out.join("target.ppm"), pair.target.to_ppm().as_bytes())?;
            write_atomic(&cfg.out.join("sample.ppm"), img.to_ppm().as_bytes())?;
            let score = eval::score(&img, &pair)?;
            println!("{}", json!({ "task": task, "index": index, "score": score }));
            Ok(())
        }
        Command::Compare { common, mode, base, steps } => {
            let mut cfg = resolve(&common)?;
            if base.is_some() {
                cfg.base = base;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cmd_compare(&cfg, mode)
        }
        Command::InspectAttn { common, checkpoint, task, sample_seed, layer, head, t } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let (model, task, _) = load_for_task(&checkpoint, task)?;
            cmd_inspect(&cfg, &model, task, sample_seed, layer, head, t)
        }
        Command::CountParams { common } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let model = Dit::new(cfg.model.clone(), cfg.seed)?;
            println!("{}", serde_json::to_string_pretty(&model.count_trainable())?);
            Ok(())
        }
    }
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    prepare_out(cfg)?;
    let started = Instant::now();
    let log_line = |p: &tokenctl::flow::LossPoint| eprintln!("step {:>6}  loss {:.5}", p.step, p.loss);
    let (outcome, metadata) = match cfg.train.target {
        TrainTarget::Base => {
            let model = Dit::new(
                ModelConfig {
                    integration: Integration::None,
                    ..cfg.model.clone()
                },
                cfg.seed,
            )?;
            let mix = Mixture(TaskKind::ALL.iter().map(|&k| Dataset::new(k, cfg.data_seed)).collect());
            let out = train_with(&model, &mix, &cfg.train, |p, _| log_line(p))?;
            (out, json!({ "task": serde_json::Value::Null, "data_seed": cfg.data_seed, "train": cfg.train }))
        }
        TrainTarget::Adapters => {
            let base = load_base(cfg.base.as_ref())?;
            let model = base.derive(cfg.model.clone(), cfg.seed)?;
            let ds = Dataset::new(cfg.task, cfg.data_seed);
            ds.spec.validate()?;
            if cfg.model.integration != Integration::None && cfg.model.position_mode != ds.spec.alignment {
                return Err(Failure::Config(format!(
                    "{:?} needs position_mode {:?}",
                    cfg.task, ds.spec.alignment
                )));
            }
            let out = train_with(&model, &ds, &cfg.train, |p, _| log_line(p))?;
            (out, json!({ "task": cfg.task, "data_seed": cfg.data_seed, "train": cfg.train }))
        }
    };
    write_atomic(&cfg.out.join("loss.tsv"), outcome.curve.to_lines("train").as_bytes())?;
    Checkpoint::from_model(&outcome.model, Some(&outcome.optimizer))
        .with_metadata(metadata.clone())
        .save(&cfg.out.join("checkpoint.odit"))?;
    if cfg.train.target == TrainTarget::Adapters {
        Checkpoint::adapters_only(&outcome.model)
            .with_metadata(metadata)
            .save(&cfg.out.join("adapters.odit"))?;
    }
    write_metadata(&cfg.out, started, json!({ "command": "train" }))
}

fn cmd_compare(cfg: &RunConfig, mode: CompareMode) -> CliResult<()> {
    let ds = Dataset::new(cfg.task, cfg.data_seed);
    let expected = match mode {
        CompareMode::Integration => tokenctl::rope::PositionMode::Aligned,
        CompareMode::Position => tokenctl::rope::PositionMode::NonAligned,
    };
    if ds.spec.alignment != expected {
        return Err(Failure::Config(format!("{:?} cannot be used for this comparison mode", cfg.task)));
    }
    prepare_out(cfg)?;
    let started = Instant::now();
    let base = load_base(cfg.base.as_ref())?;
    let seeds = &cfg.compare.seeds;
    let (json, lines) = match mode {
        CompareMode::Integration => {
            let r = compare_integrations(&base, &cfg.model, &ds, &cfg.train, seeds, |s, i, o| {
                eprintln!("seed {s} {i:?}: final {:.5}", o.curve.final_loss().unwrap_or(f64::NAN))
            })?;
            (serde_json::to_string_pretty(&r)?, r.to_lines())
        }
        CompareMode::Position => {
            let r = compare_positions(&base, &cfg.model, &ds, &cfg.train, seeds, |s, m, o| {
                eprintln!("seed {s} {m:?}: final {:.5}", o.curve.final_loss().unwrap_or(f64::NAN))
            })?;
            (serde_json::to_string_pretty(&r)?, r.to_lines())
        }
    };
    write_atomic(&cfg.out.join("curves.tsv"), lines.as_bytes())?;
    write_atomic(&cfg.out.join("report.json"), json.as_bytes())?;
    println!("{json}");
    write_metadata(&cfg.out, started, json!({ "command": "compare" }))
}

fn cmd_inspect(
    cfg: &RunConfig,
    model: &Dit,
    task: TaskKind,
    sample_seed: u64,
    layer: usize,
    head: usize,
    t: f64,
) -> CliResult<()> {
    if model.config().integration != Integration::UnifiedSequence {
        return Err(Failure::Config("attention inspection needs a unified-sequence model".into()));
    }
    if layer >= model.config().n_blocks() || head >= model.config().n_heads {
        return Err(Failure::Config(format!(
            "layer {layer} / head {head} out of range ({} layers, {} heads)",
            model.config().n_blocks(),
            model.config().n_heads
        )));
    }
    let pair = held_out(&Dataset::new(task, cfg.data_seed), sample_seed);
    let (fs_, cond) = eval::probe_input(model, &pair, t, sample_seed)?;
    let maps = model.attention_maps(ForwardInput {
        noisy: &fs_.xt,
        t,
        text: &pair.text,
        cond: Some(&cond),
        gamma: cfg.gamma,
    })?;
    let map = &maps[layer];
    let x_to_c = map.conditional_block(head, Modality::NoisyImage, Modality::CondImage)?;
    let c_to_x = map.conditional_block(head, Modality::CondImage, Modality::NoisyImage)?;
    fs::create_dir_all(&cfg.out)?;
    write_atomic(&cfg.out.join("x_to_c.txt"), format_matrix(&x_to_c)?.as_bytes())?;
    write_atomic(&cfg.out.join("c_to_x.txt"), format_matrix(&c_to_x)?.as_bytes())?;
    let summary = json!({
        "task": task,
        "layer": layer,
        "head": head,
        "t": t,
        "gamma": cfg.gamma,
        "sample_seed": sample_seed,
        "x_to_c_dominance": diag_dominance(&x_to_c)?,
        "c_to_x_dominance": diag_dominance(&c_to_x)?,
        "x_to_c_mass": map.cross_mass(Modality::NoisyImage, Modality::CondImage)?,
        "uniform": 1.0 / model.config().n_tokens() as f64,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    write_atomic(&cfg.out.join("summary.json"), text.as_bytes())?;
    println!("{text}");
    Ok(())
}
