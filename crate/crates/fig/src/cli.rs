//! Command-line surface: dataset generation, training, evaluation, heatmap
//! export, gradient checking, and the regularization-effect experiment.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid data or config, 3
//! numerical failure (divergence or a failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_model, save_model};
use crate::data::{gen_motif_dataset, load_jsonl, Batch, MotifGenConfig};
use crate::error::{FigError, Result};
use crate::eval::{export_attention, rationale_recovery, reg_effect_experiment, write_reg_effect_csv};
use crate::metrics::MetricReport;
use crate::objective::Task;
use crate::trainer::{
    evaluate, full_loss_grad_check_refined, jitter_params, train, Model, TrainConfig, Variant,
};

#[derive(Parser)]
#[command(name = "fig", about = "Fine-grained graph rationalization", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motif-classification dataset as JSONL.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write one graph's attention matrix as CSV plus a JSON sidecar.
    ExportAttention(ExportAttentionArgs),
    /// Finite-difference check of the full training gradient.
    GradCheck(GradCheckArgs),
    /// Train with and without the cut penalty across seeds and compare.
    RegEffect(RegEffectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    num_graphs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smallest environment size, inclusive.
    #[arg(long, default_value_t = 3)]
    env_min: usize,
    /// Largest environment size, inclusive.
    #[arg(long, default_value_t = 15)]
    env_max: usize,
    /// One-hot degree feature width.
    #[arg(long, default_value_t = 10)]
    feature_dim: usize,
    /// Probability of rewiring each environment edge.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training-set JSONL.
    #[arg(long)]
    train: PathBuf,
    /// Validation-set JSONL.
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Optional epoch-log output, one JSON object per line.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset JSONL to score.
    #[arg(long)]
    data: PathBuf,
    /// Also score the selected nodes against planted rationales.
    #[arg(long)]
    recovery: bool,
}

#[derive(Args)]
struct ExportAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which graph of the dataset to export.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// CSV output path; the sidecar lands next to it with extension json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Graphs in the probe batch.
    #[arg(long, default_value_t = 4)]
    graphs: usize,
    /// Largest central-difference step; the check refines per coordinate
    /// down four decades from here.
    #[arg(long, default_value_t = 3e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct RegEffectArgs {
    /// Training-set JSONL.
    #[arg(long)]
    train: PathBuf,
    /// Validation-set JSONL.
    #[arg(long)]
    val: PathBuf,
    /// Test-set JSONL.
    #[arg(long)]
    test: PathBuf,
    /// JSON training config for the regularized arm.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, one matched pair per seed.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (the zeroth entry is the program name) and runs the chosen
/// subcommand, returning the process exit code.
pub fn cli_main<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok((text, code)) => {
            print!("{text}");
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FigError::NonFinite { .. } => 3,
                _ => 2,
            }
        }
    }
}

fn run(command: Command) -> Result<(String, i32)> {
    match command {
        Command::GenData(a) => run_gen_data(&a).map(|t| (t, 0)),
        Command::Train(a) => run_train(&a).map(|t| (t, 0)),
        Command::Eval(a) => run_eval(&a).map(|t| (t, 0)),
        Command::ExportAttention(a) => run_export_attention(&a).map(|t| (t, 0)),
        Command::GradCheck(a) => run_grad_check(&a),
        Command::RegEffect(a) => run_reg_effect(&a).map(|t| (t, 0)),
    }
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::BinaryClassification => "accuracy",
        Task::Regression => "rmse",
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| FigError::io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| FigError::Config(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run_gen_data(a: &GenDataArgs) -> Result<String> {
    let dataset = gen_motif_dataset(&MotifGenConfig {
        num_graphs: a.num_graphs,
        env_size_range: (a.env_min, a.env_max),
        feature_dim: a.feature_dim,
        noise: a.noise,
        seed: a.seed,
        ..MotifGenConfig::default()
    })?;
    crate::data::save_jsonl(&dataset, &a.out)?;
    Ok(format!("wrote {} graphs to {}\n", dataset.len(), a.out.display()))
}

fn run_train(a: &TrainArgs) -> Result<String> {
    let config = load_config(a.config.as_deref(), a.seed)?;
    let train_set = load_jsonl(&a.train)?;
    let val_set = load_jsonl(&a.val)?;
    let outcome = train(&config, &train_set, &val_set)?;
    save_model(&outcome.model, &a.out)?;
    if let Some(path) = &a.log {
        let mut text = String::new();
        for entry in &outcome.log {
            text += &serde_json::to_string(entry).expect("plain numeric fields serialize");
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| FigError::io(path.display().to_string(), e))?;
    }
    let metric = metric_name(config.task);
    let mut out = String::new();
    for entry in &outcome.log {
        let _ = writeln!(
            out,
            "epoch {:>3}  lr {:.3e}  loss {:.6}  val {metric} {:.6}",
            entry.epoch, entry.lr, entry.report.total, entry.val_metric
        );
    }
    match outcome.best_epoch {
        Some(e) => {
            let _ = writeln!(out, "best epoch {e}, val {metric} {:.6}", outcome.best_val);
        }
        None => {
            let _ = writeln!(out, "no epoch improved on the initialization, val {metric} {:.6}", outcome.best_val);
        }
    }
    let _ = writeln!(out, "checkpoint written to {}", a.out.display());
    Ok(out)
}

fn run_eval(a: &EvalArgs) -> Result<String> {
    let model = load_model(&a.checkpoint)?;
    let dataset = load_jsonl(&a.data)?;
    let report = MetricReport {
        metric: metric_name(model.config.task).into(),
        value: evaluate(&model, &dataset)?,
        n_samples: dataset.len(),
        per_seed: Vec::new(),
    };
    let mut out = serde_json::to_string(&report).expect("plain numeric fields serialize");
    out.push('\n');
    if a.recovery {
        let recovery = rationale_recovery(&model, &dataset)?;
        out += &serde_json::to_string(&recovery).expect("plain numeric fields serialize");
        out.push('\n');
    }
    Ok(out)
}

fn run_export_attention(a: &ExportAttentionArgs) -> Result<String> {
    let model = load_model(&a.checkpoint)?;
    let dataset = load_jsonl(&a.data)?;
    let graph = dataset.graphs.get(a.index).ok_or_else(|| {
        FigError::Argument(format!(
            "graph index {} out of range for {} graphs",
            a.index,
            dataset.len()
        ))
    })?;
    let sidecar = export_attention(&model, graph, &a.out)?;
    let mut out = serde_json::to_string(&sidecar).expect("plain numeric fields serialize");
    out.push('\n');
    let _ = writeln!(out, "wrote {} and {}", a.out.display(), a.out.with_extension("json").display());
    Ok(out)
}

fn run_grad_check(a: &GradCheckArgs) -> Result<(String, i32)> {
    if a.graphs == 0 {
        return Err(FigError::Argument("the probe batch needs at least one graph".into()));
    }
    if a.step <= 0.0 {
        return Err(FigError::Argument(format!("step {} must be positive", a.step)));
    }
    let dataset = gen_motif_dataset(&MotifGenConfig {
        num_graphs: a.graphs,
        env_size_range: (3, 3),
        feature_dim: 6,
        seed: a.seed,
        ..MotifGenConfig::default()
    })?;
    let batch = Batch {
        indices: (0..a.graphs).collect(),
        partner: (0..a.graphs).map(|j| (j + 1) % a.graphs).collect(),
    };
    let steps: Vec<f64> = (0..5).map(|k| a.step / 10f64.powi(k)).collect();
    let mut out = String::new();
    let mut worst = 0.0_f64;
    for variant in [Variant::FigN, Variant::FigVn] {
        let config = TrainConfig {
            variant,
            d: 6,
            encoder_layers: 2,
            r: 4,
            seed: a.seed,
            ..TrainConfig::default()
        };
        let mut err = f64::INFINITY;
        for attempt in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed + (attempt << 32));
            let mut model =
                Model::new(config.clone(), dataset.graphs[0].d_x, None, dataset.n_max(), &mut rng)?;
            jitter_params(&mut model, 0.05, &mut rng);
            err = full_loss_grad_check_refined(&model, &dataset, &batch, &steps, a.tolerance)?;
            if err < a.tolerance {
                break;
            }
        }
        worst = worst.max(err);
        let _ = writeln!(out, "{:<6} max relative error {err:.3e}", variant.name());
    }
    let passed = worst < a.tolerance;
    let _ = writeln!(
        out,
        "gradient check {} (tolerance {:.0e})",
        if passed { "passed" } else { "failed" },
        a.tolerance
    );
    Ok((out, if passed { 0 } else { 3 }))
}

fn run_reg_effect(a: &RegEffectArgs) -> Result<String> {
    let config = load_config(a.config.as_deref(), None)?;
    let train_set = load_jsonl(&a.train)?;
    let val_set = load_jsonl(&a.val)?;
    let test_set = load_jsonl(&a.test)?;
    let table = reg_effect_experiment(&config, &a.seeds, &train_set, &val_set, &test_set)?;
    write_reg_effect_csv(&table, &a.out)?;
    let metric = metric_name(config.task);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "beta_hat 0: mean off-block mass {:.6}, mean test {metric} {:.6}",
        table.mean_off_block_mass(false),
        table.mean_test_metric(false)
    );
    let _ = writeln!(
        out,
        "beta_hat {}: mean off-block mass {:.6}, mean test {metric} {:.6}",
        config.beta_hat,
        table.mean_off_block_mass(true),
        table.mean_test_metric(true)
    );
    let _ = writeln!(out, "table written to {}", a.out.display());
    Ok(out)
}
