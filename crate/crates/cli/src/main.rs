use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use newsdistill::config::PipelineConfig;
use newsdistill::eval::{AblationMode, SweepParam};
use newsdistill::pipeline::{RunDir, StageOutcome};
use newsdistill::Error;
use serde_json::json;

const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

/// Two-stage multi-teacher distillation pipeline. Each subcommand runs one
/// stage inside a run directory and prints a JSON summary on stdout.
#[derive(Parser)]
#[command(name = "newsdistill", version)]
struct Cli {
    /// TOML config; defaults to the run directory's saved config, then the
    /// bundled one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Seed applied to the corpus, model and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize (or ingest) the corpus.
    Generate,
    /// Collect every teacher's answer on the train and validation items.
    Acquire,
    /// Split by teacher agreement and request gold labels for conflicts.
    Partition,
    TrainStage1,
    TrainStage2,
    /// Score an ablation on the test split.
    Evaluate {
        #[arg(long, default_value = "full")]
        ablation: String,
    },
    /// Retrain the curriculum for each value of one hyperparameter.
    Sweep {
        /// lora_rank, dpo_alpha or beta.
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<f64>,
    },
    /// Finite-difference check of the loss gradients.
    Gradcheck,
    /// Every stage from generate through evaluate (full).
    Run,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> newsdistill::Result<PipelineConfig> {
    let saved = cli.run_dir.join("config.toml");
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None if saved.exists() => PipelineConfig::load(&saved)?,
        None => {
            let c: PipelineConfig =
                toml::from_str(DEFAULT_CONFIG).map_err(|e| Error::Config(format!("bundled config: {e}")))?;
            c.validate()?;
            c
        }
    };
    Ok(match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn run(cli: &Cli) -> newsdistill::Result<serde_json::Value> {
    let config = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(serde_json::Value::Null);
    }
    let mut dir = RunDir::open(&cli.run_dir, config)?;
    let outcome: Vec<StageOutcome> = match &cli.command {
        Command::Generate => vec![dir.generate()?],
        Command::Acquire => vec![dir.acquire()?],
        Command::Partition => vec![dir.partition()?],
        Command::TrainStage1 => vec![dir.train_stage1()?],
        Command::TrainStage2 => vec![dir.train_stage2()?],
        Command::Evaluate { ablation } => vec![dir.evaluate(ablation.parse::<AblationMode>()?)?],
        Command::Sweep { param, values } => vec![dir.sweep(param.parse::<SweepParam>()?, values)?],
        Command::Gradcheck => vec![dir.gradcheck()?],
        Command::Run => dir.run_all()?,
        Command::ShowConfig => unreachable!("handled above"),
    };
    Ok(match outcome.as_slice() {
        [one] => serde_json::to_value(one)?,
        many => serde_json::to_value(many)?,
    })
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim().to_string(), 2),
    };
    match run(&cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut message = e.to_string();
            if let Error::Ordering { missing, .. } = &e {
                message.push_str(&format!("; run `newsdistill {missing}` first"));
            }
            fail(e.kind(), message, 1)
        }
    }
}
