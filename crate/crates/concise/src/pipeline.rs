//! Chain construction: confidence injection, early stopping, answer
//! elicitation, summary generation, and plain baseline sampling.
//!
//! The generation loop drafts one step at a time. A draft that opens a
//! reflection is not kept: a confidence phrase is sampled from the pool
//! and the step is regenerated from the phrase (the regeneration is kept
//! even if it still reflects). After each kept step the confidence
//! detector probes the model; once `ĉ > t_e` the final answer is
//! elicited. During dataset construction the answer must verify against
//! the ground truth — otherwise the loop continues, and a chain whose
//! terminal answer never verifies is discarded.

use crate::answer::verify_answer;
use crate::backend::{Backend, BackendError, CompletionRequest, GenerationParams};
use crate::chain::{ChainError, PromptTemplate, ReasoningChain, Step, StepKind, Task, Termination};
use crate::confidence::{detect_confidence, ConfidenceReading, DetectorConfig, PhrasePool};
use crate::reflect::{is_reflection_start, KeywordSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

/// Token cap for answer elicitation calls.
pub const ANSWER_MAX_TOKENS: usize = 64;

/// Marker appended to elicit the final answer.
pub const FINAL_ANSWER_MARKER: &str = "Final Answer:";

/// Pipeline errors.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// A backend call failed.
    #[error(transparent)]
    Backend(#[from] BackendError),
    /// A chain invariant was violated.
    #[error(transparent)]
    Chain(#[from] ChainError),
    /// The model generated an empty step (treated as a natural end by the
    /// construction loop).
    #[error("model generated an empty step")]
    EmptyGeneration,
    /// The operation needs at least one step.
    #[error("chain has no steps")]
    EmptyChain,
    /// Dataset construction requires a reference answer.
    #[error("task {0:?} has no ground truth")]
    MissingGroundTruth(String),
}

/// Everything the construction loop needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Sampling parameters for step generation.
    pub gen: GenerationParams,
    /// Confidence detector settings.
    pub detector: DetectorConfig,
    /// Injected-phrase pool.
    pub pool: PhrasePool,
    /// Reflection keywords.
    pub keywords: KeywordSet,
    /// Prompt scaffolding.
    pub template: PromptTemplate,
    /// Maximum number of kept steps.
    pub max_steps: usize,
    /// Cumulative generated-token budget (steps, probes, elicitations,
    /// summary).
    pub max_total_tokens: usize,
    /// Whether injected steps keep the phrase text inline.
    pub keep_injected_phrase: bool,
    /// Token cap for summary generation.
    pub summary_max_tokens: usize,
    /// When set, confidence probing starts only after a step matches an
    /// answer-like pattern, trading fidelity for fewer probe calls.
    pub probe_only_after_answer_pattern: bool,
    /// Base seed for phrase sampling and plain-sample derivation.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gen: GenerationParams::default(),
            detector: DetectorConfig::default(),
            pool: PhrasePool::default(),
            keywords: KeywordSet::default(),
            template: PromptTemplate::default(),
            max_steps: 512,
            max_total_tokens: 16_384,
            keep_injected_phrase: true,
            summary_max_tokens: 256,
            probe_only_after_answer_pattern: false,
            seed: 0,
        }
    }
}

/// Whether a construction run emitted a usable chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildStatus {
    /// Verified and kept.
    Emitted,
    /// Dropped (failed verification or a backend error).
    Discarded,
}

/// Result of one dataset-construction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOutcome {
    /// Emitted or discarded.
    pub status: BuildStatus,
    /// The chain (terminated; `discarded` when dropped).
    pub chain: ReasoningChain,
    /// Confidence readings in probe order.
    pub probes: Vec<ConfidenceReading>,
    /// Number of phrase injections performed.
    pub injections: usize,
    /// Step ordinal at which the early-stop fired, when it did.
    pub stop_step: Option<usize>,
    /// Whether the summary hit its token cap.
    pub summary_truncated: bool,
    /// Backend error absorbed into a discard, when one occurred.
    pub error: Option<String>,
}

/// Per-task manifest line summarizing a construction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    /// Task id.
    pub id: String,
    /// Emitted or discarded.
    pub status: BuildStatus,
    /// Kept step count.
    pub steps: usize,
    /// Sum of per-step token counts.
    pub tokens: usize,
    /// Phrase injections performed.
    pub injections: usize,
    /// Early-stop ordinal, when the stop fired.
    pub stop_step: Option<usize>,
    /// Confidence values in probe order.
    pub probes: Vec<f64>,
}

impl From<&BuildOutcome> for ManifestRow {
    fn from(outcome: &BuildOutcome) -> Self {
        ManifestRow {
            id: outcome.chain.task.id.clone(),
            status: outcome.status,
            steps: outcome.chain.steps.len(),
            tokens: outcome.chain.total_step_tokens(),
            injections: outcome.injections,
            stop_step: outcome.stop_step,
            probes: outcome.probes.iter().map(|p| p.value).collect(),
        }
    }
}

/// One plain (intervention-free) sampled chain.
///
/// Serializes as the chain object itself plus a `correct` flag, so a file of
/// plain samples is also readable as a chain corpus (e.g. as the baseline
/// side of a compression report).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainSample {
    /// The parsed chain.
    #[serde(flatten)]
    pub chain: ReasoningChain,
    /// Whether its answer verified against the ground truth.
    pub correct: bool,
}

/// A generated summary.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSummary {
    /// Summary text.
    pub text: String,
    /// Whether generation hit the token cap.
    pub truncated: bool,
    /// Backend-reported token count.
    pub token_count: usize,
}

/// The prompt a step generation continues from. `render_prompt` never ends
/// with a delimiter, so plain continuation of a non-empty chain appends
/// one — otherwise generation with `stop = [delimiter]` would match at
/// position zero. Injected regeneration continues from the phrase itself.
pub fn step_prompt(chain: &ReasoningChain, template: &PromptTemplate, injection: Option<&str>) -> String {
    let rendered = chain.render_prompt(template, injection);
    if injection.is_none() && !chain.steps.is_empty() {
        format!("{rendered}{}", template.step_delimiter)
    } else {
        rendered
    }
}

/// The elicitation prompt: rendered chain, newline, answer marker.
pub fn answer_prompt(chain: &ReasoningChain, template: &PromptTemplate) -> String {
    format!("{}\n{FINAL_ANSWER_MARKER}", chain.render_prompt(template, None))
}

/// The summary prompt: rendered chain, delimiter, think-close marker.
pub fn summary_prompt(chain: &ReasoningChain, template: &PromptTemplate) -> String {
    format!(
        "{}{}{}\n",
        chain.render_prompt(template, None),
        template.step_delimiter,
        template.think_close
    )
}

/// Generates the next step of `chain`, classifying it and recording the
/// injected phrase when one is given.
pub fn next_step(
    chain: &ReasoningChain,
    config: &PipelineConfig,
    backend: &dyn Backend,
    injection: Option<&str>,
) -> Result<Step, PipelineError> {
    if !chain.is_open() {
        return Err(ChainError::ChainClosed(chain.terminated).into());
    }
    let request = CompletionRequest::new(
        step_prompt(chain, &config.template, injection),
        vec![config.template.step_delimiter.clone()],
        &config.gen,
    );
    let result = backend.generate(&request)?;
    if result.text.trim().is_empty() {
        return Err(PipelineError::EmptyGeneration);
    }
    let index = chain.steps.len() + 1;
    Ok(match injection {
        Some(phrase) => {
            let (text, token_count) = if config.keep_injected_phrase {
                let text = format!("{phrase}{}", result.text).trim().to_string();
                (text, result.token_count + backend.count_tokens(phrase)?)
            } else {
                (result.text.trim().to_string(), result.token_count)
            };
            Step {
                index,
                text,
                kind: StepKind::Injected,
                injected_phrase: Some(phrase.to_string()),
                token_count,
            }
        }
        None => {
            let text = result.text.trim().to_string();
            let kind = if is_reflection_start(&text, &config.keywords) {
                StepKind::ReflectionStart
            } else {
                StepKind::Plain
            };
            Step {
                index,
                text,
                kind,
                injected_phrase: None,
                token_count: result.token_count,
            }
        }
    })
}

fn elicit_with_cost(
    chain: &ReasoningChain,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<(String, usize), PipelineError> {
    if chain.steps.is_empty() {
        return Err(PipelineError::EmptyChain);
    }
    let request = CompletionRequest {
        prompt: answer_prompt(chain, &config.template),
        max_tokens: ANSWER_MAX_TOKENS,
        temperature: config.gen.temperature,
        top_p: config.gen.top_p,
        stop: vec!["\n".into()],
        seed: None,
    };
    let result = backend.generate(&request)?;
    Ok((result.text, result.token_count))
}

/// Elicits the final answer from the chain so far; the transcript is not
/// appended to the chain and the raw text is returned.
pub fn elicit_final_answer(
    chain: &ReasoningChain,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<String, PipelineError> {
    elicit_with_cost(chain, config, backend).map(|(text, _)| text)
}

/// Closes the reasoning section and generates the post-reasoning summary.
pub fn generate_summary(
    chain: &ReasoningChain,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<GeneratedSummary, PipelineError> {
    let request = CompletionRequest {
        prompt: summary_prompt(chain, &config.template),
        max_tokens: config.summary_max_tokens,
        temperature: config.gen.temperature,
        top_p: config.gen.top_p,
        stop: vec![],
        seed: None,
    };
    let result = backend.generate(&request)?;
    Ok(GeneratedSummary {
        text: result.text.trim().to_string(),
        truncated: result.finish_reason == crate::backend::FinishReason::Length,
        token_count: result.token_count,
    })
}

static ANSWER_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\\boxed\{|final answer|the answer is").expect("static regex")
});

/// FNV-1a over the task id, mixed with the run seed, so per-task RNG
/// streams are stable across platforms and corpus orderings.
fn task_seed(seed: u64, id: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in id.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash ^ seed
}

/// How a construction loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EndSignal {
    Early,
    Natural,
    Budget,
}

impl EndSignal {
    fn termination(self) -> Termination {
        match self {
            EndSignal::Early => Termination::EarlyStopped,
            EndSignal::Natural => Termination::NaturalEnd,
            EndSignal::Budget => Termination::BudgetExhausted,
        }
    }
}

struct RunState {
    chain: ReasoningChain,
    probes: Vec<ConfidenceReading>,
    injections: usize,
    end: EndSignal,
    stop_step: Option<usize>,
    elicited: Option<String>,
    verified: bool,
}

/// Splits step text at the think-close marker, returning the trimmed
/// fragment before it when the marker is present.
fn split_at_think_close<'t>(text: &'t str, marker: &str) -> Option<&'t str> {
    text.find(marker).map(|pos| text[..pos].trim())
}

/// The shared generation loop. With `verify_against = Some(gt)` an
/// above-threshold elicitation only stops the loop when it verifies; with
/// `None` the first above-threshold elicitation stops it unconditionally.
fn run_chain(
    task: &Task,
    config: &PipelineConfig,
    backend: &dyn Backend,
    verify_against: Option<&str>,
) -> Result<RunState, PipelineError> {
    let template = &config.template;
    let mut chain = ReasoningChain::new(task.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(config.seed, &task.id));
    let mut probes = Vec::new();
    let mut injections = 0usize;
    let mut tokens_used = 0usize;
    let mut end: Option<EndSignal> = None;
    let mut stop_step = None;
    let mut elicited: Option<String> = None;
    let mut verified = false;
    let mut probing_active = !config.probe_only_after_answer_pattern;

    for ordinal in 1..=config.max_steps {
        if tokens_used >= config.max_total_tokens {
            end = Some(EndSignal::Budget);
            break;
        }
        let draft = match next_step(&chain, config, backend, None) {
            Ok(step) => step,
            Err(PipelineError::EmptyGeneration) => {
                end = Some(EndSignal::Natural);
                break;
            }
            Err(e) => return Err(e),
        };
        tokens_used += draft.token_count;

        // A close marker in the draft ends the reasoning section; the
        // fragment before it is kept (termination outranks reflection).
        if let Some(fragment) = split_at_think_close(&draft.text, &template.think_close) {
            if !fragment.is_empty() {
                let kind = if is_reflection_start(fragment, &config.keywords) {
                    StepKind::ReflectionStart
                } else {
                    StepKind::Plain
                };
                let token_count = backend.count_tokens(fragment)?;
                chain = chain.append_step(Step {
                    index: ordinal,
                    text: fragment.to_string(),
                    kind,
                    injected_phrase: None,
                    token_count,
                })?;
            }
            end = Some(EndSignal::Natural);
            break;
        }

        let step = if draft.kind == StepKind::ReflectionStart {
            let phrase = config.pool.sample_phrase(&mut rng).to_string();
            injections += 1;
            let regenerated = match next_step(&chain, config, backend, Some(&phrase)) {
                Ok(step) => step,
                Err(PipelineError::EmptyGeneration) => {
                    end = Some(EndSignal::Natural);
                    break;
                }
                Err(e) => return Err(e),
            };
            tokens_used += regenerated.token_count;
            if let Some(fragment) = split_at_think_close(&regenerated.text, &template.think_close)
            {
                if !fragment.is_empty() {
                    let token_count = backend.count_tokens(fragment)?;
                    chain = chain.append_step(Step {
                        index: ordinal,
                        text: fragment.to_string(),
                        kind: StepKind::Injected,
                        injected_phrase: regenerated.injected_phrase.clone(),
                        token_count,
                    })?;
                }
                end = Some(EndSignal::Natural);
                break;
            }
            regenerated
        } else {
            draft
        };

        chain = chain.append_step(step)?;
        if !probing_active {
            let last = chain.steps.last().expect("just appended");
            if ANSWER_PATTERN.is_match(&last.text) {
                probing_active = true;
            }
        }
        if !probing_active {
            continue;
        }

        let reading = detect_confidence(&chain, template, &config.detector, backend)?;
        tokens_used += if reading.second_query_used { 2 } else { 1 };
        let confidence = reading.value;
        probes.push(reading);
        if confidence > config.detector.threshold {
            let (answer, cost) = elicit_with_cost(&chain, config, backend)?;
            tokens_used += cost;
            match verify_against {
                Some(ground_truth) => {
                    let ok = verify_answer(&answer, ground_truth);
                    elicited = Some(answer);
                    if ok {
                        verified = true;
                        stop_step = Some(ordinal);
                        end = Some(EndSignal::Early);
                        break;
                    }
                }
                None => {
                    elicited = Some(answer);
                    stop_step = Some(ordinal);
                    end = Some(EndSignal::Early);
                    break;
                }
            }
        }
    }

    Ok(RunState {
        chain,
        probes,
        injections,
        end: end.unwrap_or(EndSignal::Budget),
        stop_step,
        elicited,
        verified,
    })
}

/// Whether a backend failure is absorbed into a discarded outcome rather
/// than propagated: availability-class errors are, script misses are not —
/// a script miss means the test harness itself is wrong.
fn absorbable(error: &BackendError) -> bool {
    matches!(
        error,
        BackendError::Unavailable(_)
            | BackendError::Rejected(_)
            | BackendError::BudgetExceeded { .. }
            | BackendError::ProbeUnsupported
    )
}

/// Builds one training chain for `task` (requires ground truth).
///
/// The chain is emitted only when a terminal elicitation verified; chains
/// that end naturally or on budget get one last elicitation attempt.
/// Absorbable backend failures produce a `discarded` outcome carrying the
/// error text instead of failing the whole corpus run.
pub fn build_concise_chain(
    task: &Task,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<BuildOutcome, PipelineError> {
    let ground_truth = task
        .ground_truth
        .clone()
        .ok_or_else(|| PipelineError::MissingGroundTruth(task.id.clone()))?;

    let state = match run_chain(task, config, backend, Some(&ground_truth)) {
        Ok(state) => state,
        Err(PipelineError::Backend(e)) if absorbable(&e) => {
            let mut chain = ReasoningChain::new(task.clone());
            chain.terminated = Termination::Discarded;
            return Ok(BuildOutcome {
                status: BuildStatus::Discarded,
                chain,
                probes: Vec::new(),
                injections: 0,
                stop_step: None,
                summary_truncated: false,
                error: Some(e.to_string()),
            });
        }
        Err(e) => return Err(e),
    };

    let RunState {
        mut chain,
        probes,
        injections,
        end,
        stop_step,
        mut elicited,
        mut verified,
    } = state;

    // Natural or budget terminations get one final elicitation attempt.
    if end != EndSignal::Early && !chain.steps.is_empty() {
        match elicit_with_cost(&chain, config, backend) {
            Ok((answer, _)) => {
                verified = verify_answer(&answer, &ground_truth);
                elicited = Some(answer);
            }
            Err(PipelineError::Backend(e)) if absorbable(&e) => {
                chain.final_answer = elicited;
                chain.terminated = Termination::Discarded;
                return Ok(BuildOutcome {
                    status: BuildStatus::Discarded,
                    chain,
                    probes,
                    injections,
                    stop_step: None,
                    summary_truncated: false,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }

    chain.final_answer = elicited;
    if !verified {
        chain.terminated = Termination::Discarded;
        return Ok(BuildOutcome {
            status: BuildStatus::Discarded,
            chain,
            probes,
            injections,
            stop_step: None,
            summary_truncated: false,
            error: None,
        });
    }

    let summary = match generate_summary(&chain, config, backend) {
        Ok(summary) => summary,
        Err(PipelineError::Backend(e)) if absorbable(&e) => {
            chain.terminated = Termination::Discarded;
            return Ok(BuildOutcome {
                status: BuildStatus::Discarded,
                chain,
                probes,
                injections,
                stop_step: None,
                summary_truncated: false,
                error: Some(e.to_string()),
            });
        }
        Err(e) => return Err(e),
    };
    chain.summary = Some(summary.text);
    chain.terminated = end.termination();
    Ok(BuildOutcome {
        status: BuildStatus::Emitted,
        chain,
        probes,
        injections,
        stop_step,
        summary_truncated: summary.truncated,
        error: None,
    })
}

/// Training-free decoding: the same loop, but the first above-threshold
/// elicitation is trusted (no verification and nothing is discarded).
/// Early and natural terminations produce a summary; budget exhaustion
/// leaves the response truncated.
pub fn concise_decode(
    task: &Task,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<ReasoningChain, PipelineError> {
    let state = run_chain(task, config, backend, None)?;
    let RunState {
        mut chain,
        end,
        mut elicited,
        ..
    } = state;

    if end != EndSignal::Early && !chain.steps.is_empty() {
        let (answer, _) = elicit_with_cost(&chain, config, backend)?;
        elicited = Some(answer);
    }
    chain.final_answer = elicited;
    if end != EndSignal::Budget {
        let summary = generate_summary(&chain, config, backend)?;
        chain.summary = Some(summary.text);
    }
    chain.terminated = end.termination();
    Ok(chain)
}

/// Draws `n` intervention-free chains at `temperature`, one full-response
/// generation each, with request seeds `config.seed + index`. Each sample
/// is parsed into steps on the delimiter, split at the think-close marker,
/// and verified against the ground truth. Samples fail independently.
pub fn sample_plain_chain(
    task: &Task,
    n: usize,
    temperature: f64,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Vec<Result<PlainSample, PipelineError>> {
    (0..n)
        .map(|index| sample_one(task, temperature, config.seed.wrapping_add(index as u64), config, backend))
        .collect()
}

fn sample_one(
    task: &Task,
    temperature: f64,
    seed: u64,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<PlainSample, PipelineError> {
    let template = &config.template;
    let base = ReasoningChain::new(task.clone());
    let request = CompletionRequest {
        prompt: base.render_prompt(template, None),
        max_tokens: config.max_total_tokens,
        temperature,
        top_p: config.gen.top_p,
        stop: vec![],
        seed: Some(seed),
    };
    let result = backend.generate(&request)?;

    let (think_part, summary) = match result.text.find(&template.think_close) {
        Some(pos) => {
            let after = &result.text[pos + template.think_close.len()..];
            (&result.text[..pos], Some(after.trim().to_string()))
        }
        None => (result.text.as_str(), None),
    };
    let mut chain = base;
    for part in think_part.split(&template.step_delimiter) {
        let text = part.trim();
        if text.is_empty() {
            continue;
        }
        let kind = if is_reflection_start(text, &config.keywords) {
            StepKind::ReflectionStart
        } else {
            StepKind::Plain
        };
        let token_count = backend.count_tokens(text)?;
        let index = chain.steps.len() + 1;
        chain = chain.append_step(Step {
            index,
            text: text.to_string(),
            kind,
            injected_phrase: None,
            token_count,
        })?;
    }
    let correct = task
        .ground_truth
        .as_deref()
        .map(|gt| verify_answer(&result.text, gt))
        .unwrap_or(false);
    chain.final_answer = Some(crate::answer::extract_answer(&result.text));
    chain.terminated = if summary.is_some() {
        Termination::NaturalEnd
    } else {
        Termination::BudgetExhausted
    };
    chain.summary = summary;
    Ok(PlainSample { chain, correct })
}
