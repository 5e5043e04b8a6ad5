//! `concise` — confidence-guided compressed reasoning-chain tooling.
//!
//! Six subcommands cover the pipeline end to end: `build-dataset`
//! constructs compressed chains plus SFT/preference datasets, `decode`
//! runs the training-free variant, `annotate` marks reflection steps,
//! `metrics` reports accuracy/token/compression statistics, `phrase-eval`
//! scores injection phrases, and `sweep-threshold` buckets stop locations
//! across confidence thresholds.
//!
//! Exit codes: 0 success; 1 per-task run failures (a machine-readable
//! `{"error", "task_ids"}` summary goes to stderr); 2 configuration or
//! usage errors.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::{AnnotateMode, CliError};
use config::{BackendSpec, GlobalConfig};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "concise", version, about = "Confidence-guided compressed reasoning chains")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override the config file.
#[derive(Debug, Args)]
struct GlobalArgs {
    /// Configuration file (JSON); flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use an HTTP completion backend at this base URL.
    #[arg(long, global = true, value_name = "URL")]
    backend_url: Option<String>,
    /// Use a scripted backend loaded from this JSON file.
    #[arg(long, global = true, value_name = "FILE", conflicts_with = "backend_url")]
    script: Option<PathBuf>,
    /// Pipeline seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-task work.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Early-stop confidence threshold.
    #[arg(long = "t-e", global = true, value_name = "THRESHOLD")]
    t_e: Option<f64>,
    /// Maximum reasoning steps per chain.
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    /// Output directory root.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build compressed chains and emit SFT + preference datasets.
    BuildDataset {
        /// Task corpus (JSONL, one task per line).
        #[arg(long)]
        tasks: PathBuf,
        /// Run name; outputs land under chains/, datasets/, reports/.
        #[arg(long, default_value = "run")]
        name: String,
        /// Plain baseline samples per task.
        #[arg(long)]
        samples: Option<usize>,
        /// Temperature for the plain samples.
        #[arg(long)]
        sample_temperature: Option<f64>,
    },
    /// Training-free compressed decoding over a task corpus.
    Decode {
        /// Task corpus (JSONL).
        #[arg(long)]
        tasks: PathBuf,
        /// Run name.
        #[arg(long, default_value = "run")]
        name: String,
    },
    /// Annotate reflection steps in a chain corpus.
    Annotate {
        /// Chain corpus (JSONL).
        #[arg(long)]
        chains: PathBuf,
        /// Detector: keyword rule or LLM judge.
        #[arg(long, value_enum, default_value = "rule")]
        mode: AnnotateMode,
        /// Run name.
        #[arg(long, default_value = "run")]
        name: String,
    },
    /// Accuracy, token, and compression statistics for a chain corpus.
    Metrics {
        /// Chain corpus (JSONL).
        #[arg(long)]
        chains: PathBuf,
        /// Baseline chain corpus matched by task id.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Annotations (JSONL) to use instead of the keyword rule.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Run name.
        #[arg(long, default_value = "run")]
        name: String,
    },
    /// Score candidate injection phrases by reflection-trigger rate.
    PhraseEval {
        /// Candidate phrases (JSON array of strings).
        #[arg(long)]
        candidates: PathBuf,
        /// Injection-point chains (JSONL).
        #[arg(long)]
        chains: PathBuf,
        /// Run name.
        #[arg(long, default_value = "run")]
        name: String,
    },
    /// Bucket early-stop locations for probe traces across thresholds.
    SweepThreshold {
        /// Probe traces (JSONL with probes + fas).
        #[arg(long)]
        traces: PathBuf,
        /// Thresholds to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.5, 0.6, 0.7])]
        thresholds: Vec<f64>,
        /// Run name.
        #[arg(long, default_value = "run")]
        name: String,
    },
}

fn load_config(args: &GlobalArgs) -> Result<GlobalConfig, CliError> {
    let mut config = GlobalConfig::load(args.config.as_deref())
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(url) = &args.backend_url {
        config.backend = BackendSpec::Http {
            base_url: url.clone(),
            model: None,
            api_key_env: None,
        };
    }
    if let Some(path) = &args.script {
        config.backend = BackendSpec::Script { path: path.clone() };
    }
    if let Some(seed) = args.seed {
        config.pipeline.seed = seed;
    }
    if let Some(parallelism) = args.parallelism {
        config.parallelism = parallelism;
    }
    if let Some(t_e) = args.t_e {
        config.pipeline.detector.threshold = t_e;
    }
    if let Some(max_steps) = args.max_steps {
        config.pipeline.max_steps = max_steps;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::BuildDataset {
            tasks,
            name,
            samples,
            sample_temperature,
        } => commands::build_dataset(
            &config,
            &tasks,
            &name,
            samples.unwrap_or(config.sampling.plain_samples),
            sample_temperature.unwrap_or(config.sampling.temperature),
        ),
        Command::Decode { tasks, name } => commands::decode(&config, &tasks, &name),
        Command::Annotate { chains, mode, name } => {
            commands::annotate(&config, &chains, mode, &name)
        }
        Command::Metrics {
            chains,
            baseline,
            annotations,
            name,
        } => commands::metrics(
            &config,
            &chains,
            baseline.as_deref(),
            annotations.as_deref(),
            &name,
        ),
        Command::PhraseEval {
            candidates,
            chains,
            name,
        } => commands::phrase_eval(&config, &candidates, &chains, &name),
        Command::SweepThreshold {
            traces,
            thresholds,
            name,
        } => commands::sweep_threshold(&config, &traces, &thresholds, &name),
    }
}

#[derive(Serialize)]
struct ErrorSummary<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    task_ids: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(message)) => {
            let summary = ErrorSummary {
                error: &message,
                task_ids: vec![],
            };
            eprintln!("{}", serde_json::to_string(&summary).expect("serializes"));
            ExitCode::from(2)
        }
        Err(CliError::Run { message, task_ids }) => {
            let summary = ErrorSummary {
                error: &message,
                task_ids,
            };
            eprintln!("{}", serde_json::to_string(&summary).expect("serializes"));
            ExitCode::from(1)
        }
    }
}
