//! The six subcommands: dataset construction, decoding, annotation,
//! metrics, phrase evaluation, and the threshold sweep.

use crate::config::GlobalConfig;
use concise::backend::CompletionRequest;
use concise::chain::ReasoningChain;
use concise::dataset::assemble;
use concise::jsonl::{read_jsonl, write_jsonl};
use concise::metrics::{
    report, threshold_sweep, write_measures_csv, ChainStats, SweepTrace, TaskMeasure,
};
use concise::pipeline::{
    build_concise_chain, concise_decode, sample_plain_chain, BuildOutcome, BuildStatus,
    ManifestRow, PlainSample,
};
use concise::reflect::{
    annotate_rule_based, build_judge_prompt, parse_judge_output, AnnotationRecord,
    AnnotationSource, JudgeAnnotation,
};
use concise::{Backend, Task};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// A command failure, split into the exit classes the binary reports.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or unreadable inputs (exit 2).
    Config(String),
    /// The command ran but failed for specific tasks (exit 1).
    Run {
        /// Summary message.
        message: String,
        /// Tasks that failed.
        task_ids: Vec<String>,
    },
}

impl CliError {
    fn run(message: impl Into<String>, mut task_ids: Vec<String>) -> Self {
        task_ids.sort();
        task_ids.dedup();
        CliError::Run {
            message: message.into(),
            task_ids,
        }
    }
}

type CommandResult = Result<(), CliError>;

fn config_err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Config(format!("{context}: {e}"))
}

/// Collects per-item failures into one `Run` error, or returns the
/// successes in input order.
fn gather<T>(results: Vec<Result<T, (String, String)>>, what: &str) -> Result<Vec<T>, CliError> {
    let mut ok = Vec::with_capacity(results.len());
    let mut failures: Vec<(String, String)> = Vec::new();
    for result in results {
        match result {
            Ok(value) => ok.push(value),
            Err(failure) => failures.push(failure),
        }
    }
    if let Some((_, first_message)) = failures.first() {
        let ids: Vec<String> = failures.iter().map(|(id, _)| id.clone()).collect();
        return Err(CliError::run(
            format!("{what} failed for {} task(s): {first_message}", ids.len()),
            ids,
        ));
    }
    Ok(ok)
}

fn in_pool<T: Send>(parallelism: usize, work: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(config_err("building worker pool"))?;
    Ok(pool.install(work))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(config_err("creating output directory"))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(config_err("encoding json"))?;
    text.push('\n');
    std::fs::write(path, text).map_err(config_err("writing output file"))
}

fn read_tasks(path: &Path) -> Result<Vec<Task>, CliError> {
    read_jsonl(path).map_err(config_err("reading task corpus"))
}

fn read_chains(path: &Path) -> Result<Vec<ReasoningChain>, CliError> {
    read_jsonl(path).map_err(config_err("reading chain corpus"))
}

fn chains_dir(config: &GlobalConfig, name: &str) -> PathBuf {
    config.out_dir.join("chains").join(name)
}

fn datasets_dir(config: &GlobalConfig, name: &str) -> PathBuf {
    config.out_dir.join("datasets").join(name)
}

fn reports_dir(config: &GlobalConfig, name: &str) -> PathBuf {
    config.out_dir.join("reports").join(name)
}

fn print_summary<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string(value).expect("summary serializes")
    );
}

/// `build-dataset`: constructs one chain per task, draws plain baseline
/// samples, and assembles SFT and preference datasets.
///
/// Outputs under `--out`: `chains/<name>/{concise,plain,manifest}.jsonl`,
/// `datasets/<name>/{sft,preference}.jsonl`,
/// `reports/<name>/build_report.json`.
pub fn build_dataset(
    config: &GlobalConfig,
    tasks_path: &Path,
    name: &str,
    samples: usize,
    temperature: f64,
) -> CommandResult {
    let tasks = read_tasks(tasks_path)?;
    let backend = config.make_backend().map_err(config_err("backend"))?;
    let backend = backend.as_ref();
    let pipeline = &config.pipeline;

    type TaskProduct = (BuildOutcome, Vec<PlainSample>);
    let results: Vec<Result<TaskProduct, (String, String)>> =
        in_pool(config.parallelism, || {
            tasks
                .par_iter()
                .map(|task| {
                    let outcome = build_concise_chain(task, pipeline, backend)
                        .map_err(|e| (task.id.clone(), e.to_string()))?;
                    let mut plain = Vec::with_capacity(samples);
                    for sample in sample_plain_chain(task, samples, temperature, pipeline, backend)
                    {
                        plain.push(sample.map_err(|e| (task.id.clone(), e.to_string()))?);
                    }
                    Ok((outcome, plain))
                })
                .collect()
        })?;
    let products = gather(results, "dataset construction")?;

    let mut outcomes = Vec::with_capacity(products.len());
    let mut plain_by_task = BTreeMap::new();
    let mut plain_rows = Vec::new();
    for (outcome, plain) in products {
        plain_rows.extend(plain.iter().cloned());
        plain_by_task.insert(outcome.chain.task.id.clone(), plain);
        outcomes.push(outcome);
    }
    let bundle = assemble(&outcomes, &plain_by_task, &pipeline.template);

    let chains = chains_dir(config, name);
    let concise_chains: Vec<&ReasoningChain> = outcomes
        .iter()
        .filter(|o| o.status == BuildStatus::Emitted)
        .map(|o| &o.chain)
        .collect();
    write_jsonl(&chains.join("concise.jsonl"), &concise_chains)
        .map_err(config_err("writing chains"))?;
    write_jsonl(&chains.join("plain.jsonl"), &plain_rows)
        .map_err(config_err("writing plain samples"))?;
    let manifest: Vec<ManifestRow> = outcomes.iter().map(ManifestRow::from).collect();
    write_jsonl(&chains.join("manifest.jsonl"), &manifest)
        .map_err(config_err("writing manifest"))?;

    let datasets = datasets_dir(config, name);
    write_jsonl(&datasets.join("sft.jsonl"), &bundle.sft)
        .map_err(config_err("writing sft dataset"))?;
    write_jsonl(&datasets.join("preference.jsonl"), &bundle.preference)
        .map_err(config_err("writing preference dataset"))?;
    write_json_pretty(
        &reports_dir(config, name).join("build_report.json"),
        &bundle.report,
    )?;

    print_summary(&bundle.report);
    Ok(())
}

/// `decode`: training-free decoding over tasks (ground truth optional);
/// writes `chains/<name>/decoded.jsonl`.
pub fn decode(config: &GlobalConfig, tasks_path: &Path, name: &str) -> CommandResult {
    let tasks = read_tasks(tasks_path)?;
    let backend = config.make_backend().map_err(config_err("backend"))?;
    let backend = backend.as_ref();
    let pipeline = &config.pipeline;

    let results: Vec<Result<ReasoningChain, (String, String)>> =
        in_pool(config.parallelism, || {
            tasks
                .par_iter()
                .map(|task| {
                    concise_decode(task, pipeline, backend)
                        .map_err(|e| (task.id.clone(), e.to_string()))
                })
                .collect()
        })?;
    let chains = gather(results, "decoding")?;

    write_jsonl(&chains_dir(config, name).join("decoded.jsonl"), &chains)
        .map_err(config_err("writing decoded chains"))?;

    #[derive(Serialize)]
    struct Summary {
        decoded: usize,
    }
    print_summary(&Summary {
        decoded: chains.len(),
    });
    Ok(())
}

/// How `annotate` finds reflection steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnnotateMode {
    /// Keyword rule over step prefixes.
    Rule,
    /// Judge prompt against the configured backend.
    Judge,
}

fn judge_annotate(
    config: &GlobalConfig,
    backend: &dyn Backend,
    chain: &ReasoningChain,
) -> Result<AnnotationRecord, String> {
    let prompt = build_judge_prompt(&chain.task, chain).map_err(|e| e.to_string())?;
    let request = CompletionRequest {
        prompt,
        max_tokens: config.annotate.judge_max_tokens,
        temperature: 0.0,
        top_p: 1.0,
        stop: vec![],
        seed: None,
    };
    let result = backend.generate(&request).map_err(|e| e.to_string())?;
    let annotation = parse_judge_output(&result.text).map_err(|e| e.to_string())?;
    let mut record =
        AnnotationRecord::new(&chain.task.id, &annotation, AnnotationSource::Judge);
    record.unreliable = chain.total_step_tokens() > config.annotate.judge_token_cap;
    Ok(record)
}

/// `annotate`: reflection-step annotation for a chain corpus, by keyword
/// rule or by judge; writes `chains/<name>/annotations.jsonl`.
pub fn annotate(
    config: &GlobalConfig,
    chains_path: &Path,
    mode: AnnotateMode,
    name: &str,
) -> CommandResult {
    let chains = read_chains(chains_path)?;
    let results: Vec<Result<AnnotationRecord, (String, String)>> = match mode {
        AnnotateMode::Rule => chains
            .iter()
            .map(|chain| {
                annotate_rule_based(chain, &config.pipeline.keywords)
                    .map(|a| AnnotationRecord::new(&chain.task.id, &a, AnnotationSource::Rule))
                    .map_err(|e| (chain.task.id.clone(), e.to_string()))
            })
            .collect(),
        AnnotateMode::Judge => {
            let backend = config.make_backend().map_err(config_err("backend"))?;
            let backend = backend.as_ref();
            in_pool(config.parallelism, || {
                chains
                    .par_iter()
                    .map(|chain| {
                        judge_annotate(config, backend, chain)
                            .map_err(|e| (chain.task.id.clone(), e))
                    })
                    .collect()
            })?
        }
    };
    let records = gather(results, "annotation")?;

    write_jsonl(
        &chains_dir(config, name).join("annotations.jsonl"),
        &records,
    )
    .map_err(config_err("writing annotations"))?;

    #[derive(Serialize)]
    struct Summary {
        annotated: usize,
        unreliable: usize,
    }
    print_summary(&Summary {
        annotated: records.len(),
        unreliable: records.iter().filter(|r| r.unreliable).count(),
    });
    Ok(())
}

fn annotation_for(
    chain: &ReasoningChain,
    provided: Option<&BTreeMap<String, AnnotationRecord>>,
    config: &GlobalConfig,
) -> Result<JudgeAnnotation, String> {
    match provided {
        Some(map) => map
            .get(&chain.task.id)
            .ok_or_else(|| "no annotation provided for task".to_string())?
            .annotation()
            .map_err(|e| e.to_string()),
        None => annotate_rule_based(chain, &config.pipeline.keywords).map_err(|e| e.to_string()),
    }
}

/// Baseline rows only contribute their id and token count to the report,
/// so a baseline chain the rule annotator cannot place an answer step in
/// still participates, with empty reflection structure.
fn baseline_measure(chain: &ReasoningChain, config: &GlobalConfig) -> TaskMeasure {
    match annotate_rule_based(chain, &config.pipeline.keywords)
        .map_err(|e| e.to_string())
        .and_then(|a| TaskMeasure::from_chain(chain, &a).map_err(|e| e.to_string()))
    {
        Ok(measure) => measure,
        Err(_) => {
            let tokens = chain.total_step_tokens();
            let step_num = chain.steps.len();
            TaskMeasure {
                id: chain.task.id.clone(),
                benchmark: chain
                    .task
                    .meta
                    .get("benchmark")
                    .cloned()
                    .unwrap_or_else(|| "all".to_string()),
                correct: false,
                stats: ChainStats {
                    tokens,
                    step_num,
                    step_len: if step_num == 0 {
                        0.0
                    } else {
                        tokens as f64 / step_num as f64
                    },
                    ref_num: 0,
                    non_ref_num: step_num,
                    pre_fas_ref_num: 0,
                    post_fas_ref_num: 0,
                },
            }
        }
    }
}

/// `metrics`: per-task statistics and benchmark aggregates for a chain
/// corpus, optionally against a baseline corpus matched by task id;
/// writes `reports/<name>/metrics.csv` and `reports/<name>/metrics.json`.
pub fn metrics(
    config: &GlobalConfig,
    chains_path: &Path,
    baseline_path: Option<&Path>,
    annotations_path: Option<&Path>,
    name: &str,
) -> CommandResult {
    let chains = read_chains(chains_path)?;
    let provided: Option<BTreeMap<String, AnnotationRecord>> = match annotations_path {
        Some(path) => {
            let records: Vec<AnnotationRecord> =
                read_jsonl(path).map_err(config_err("reading annotations"))?;
            Some(records.into_iter().map(|r| (r.id.clone(), r)).collect())
        }
        None => None,
    };

    let results: Vec<Result<TaskMeasure, (String, String)>> = chains
        .iter()
        .map(|chain| {
            annotation_for(chain, provided.as_ref(), config)
                .and_then(|a| TaskMeasure::from_chain(chain, &a).map_err(|e| e.to_string()))
                .map_err(|e| (chain.task.id.clone(), e))
        })
        .collect();
    let rows = gather(results, "measuring chains")?;

    let baseline_rows: Vec<TaskMeasure> = match baseline_path {
        Some(path) => read_chains(path)?
            .iter()
            .map(|chain| baseline_measure(chain, config))
            .collect(),
        None => Vec::new(),
    };

    let benchmark_report = report(&rows, &baseline_rows)
        .map_err(|e| CliError::run(format!("building report: {e}"), vec![]))?;

    let reports = reports_dir(config, name);
    write_measures_csv(&reports.join("metrics.csv"), &rows)
        .map_err(config_err("writing metrics csv"))?;
    write_json_pretty(&reports.join("metrics.json"), &benchmark_report)?;

    print_summary(&benchmark_report);
    Ok(())
}

/// `phrase-eval`: measures each candidate phrase's reflection rate when
/// injected at every point of a chain corpus; writes
/// `reports/<name>/phrase_eval.csv`.
pub fn phrase_eval(
    config: &GlobalConfig,
    candidates_path: &Path,
    chains_path: &Path,
    name: &str,
) -> CommandResult {
    let text = std::fs::read_to_string(candidates_path)
        .map_err(config_err("reading candidate phrases"))?;
    let candidates: Vec<String> =
        serde_json::from_str(&text).map_err(config_err("parsing candidate phrases"))?;
    let points = read_chains(chains_path)?;
    let backend = config.make_backend().map_err(config_err("backend"))?;

    let rows = concise::confidence::evaluate_phrase_pool(
        &candidates,
        &points,
        &config.pipeline.keywords,
        &config.pipeline.template,
        &config.pipeline.gen,
        backend.as_ref(),
    );
    let path = reports_dir(config, name).join("phrase_eval.csv");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(config_err("creating output directory"))?;
    }
    concise::confidence::write_phrase_eval_csv(&path, &rows)
        .map_err(config_err("writing phrase report"))?;

    #[derive(Serialize)]
    struct Summary {
        phrases: usize,
        points: usize,
        skipped: usize,
    }
    print_summary(&Summary {
        phrases: rows.len(),
        points: points.len(),
        skipped: rows.iter().map(|r| r.skipped).sum(),
    });
    Ok(())
}

/// `sweep-threshold`: buckets first-exceed stop locations for probe
/// traces at each threshold; writes `reports/<name>/threshold_sweep.json`.
pub fn sweep_threshold(
    config: &GlobalConfig,
    traces_path: &Path,
    thresholds: &[f64],
    name: &str,
) -> CommandResult {
    let traces: Vec<SweepTrace> =
        read_jsonl(traces_path).map_err(config_err("reading traces"))?;
    let rows = threshold_sweep(&traces, thresholds)
        .map_err(|e| CliError::run(format!("sweeping thresholds: {e}"), vec![]))?;
    write_json_pretty(
        &reports_dir(config, name).join("threshold_sweep.json"),
        &rows,
    )?;
    print_summary(&rows);
    Ok(())
}
