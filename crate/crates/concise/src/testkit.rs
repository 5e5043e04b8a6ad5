//! Deterministic scripted scenarios for tests, examples, and demos.
//!
//! [`ScriptWriter`] authors backend scripts by mirroring the construction
//! loop with the crate's own prompt builders, so scripted keys cannot
//! drift from the prompts the pipeline actually issues. The corpus
//! builders return self-contained task sets with every backend call
//! pre-scripted.

use crate::backend::{word_count, ScriptedBackend};
use crate::chain::{PromptTemplate, ReasoningChain, Step, StepKind, Task};
use crate::confidence::{probe_prompt, PhrasePool};
use crate::dataset::BuildReport;
use crate::pipeline::{answer_prompt, next_step, step_prompt, summary_prompt, PipelineConfig};
use crate::reflect::is_reflection_start;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A scripted task corpus: tasks, the backend that answers every call the
/// pipeline will make for them, and the pipeline configuration the script
/// was authored against.
#[derive(Debug)]
pub struct ScenarioSet {
    /// Tasks in corpus order.
    pub tasks: Vec<Task>,
    /// Fully scripted backend.
    pub backend: ScriptedBackend,
    /// Configuration the scripts assume.
    pub config: PipelineConfig,
    /// Plain samples each task's script supports.
    pub plain_samples_per_task: usize,
}

/// Authors a backend script for one task by replaying the pipeline's own
/// prompt construction. Methods panic on misuse (they exist for tests).
pub struct ScriptWriter<'a> {
    backend: &'a mut ScriptedBackend,
    config: &'a PipelineConfig,
    chain: ReasoningChain,
}

impl<'a> ScriptWriter<'a> {
    /// Starts a script for `task` with an empty chain.
    pub fn new(backend: &'a mut ScriptedBackend, config: &'a PipelineConfig, task: &Task) -> Self {
        ScriptWriter {
            backend,
            config,
            chain: ReasoningChain::new(task.clone()),
        }
    }

    /// The mirrored chain as scripted so far.
    pub fn chain(&self) -> &ReasoningChain {
        &self.chain
    }

    fn template(&self) -> &PromptTemplate {
        &self.config.template
    }

    fn append(&mut self, step: Step) {
        self.chain = self
            .chain
            .clone()
            .append_step(step)
            .expect("script writer appends contiguously");
    }

    /// Scripts the task's base prompt as a sampled entry: index 0 must
    /// start with the first construction draft (the same prompt serves
    /// both), later indices are alternative full completions.
    pub fn sampled_base(&mut self, texts: &[&str]) -> &mut Self {
        assert!(
            self.chain.steps.is_empty(),
            "sampled_base must be scripted before any step"
        );
        let prompt = self.chain.render_prompt(self.template(), None);
        self.backend
            .script_samples(&prompt, texts.iter().map(|t| t.to_string()).collect());
        self
    }

    /// Advances the mirror by one step using entries already scripted
    /// (e.g. the first draft inside a sampled base entry).
    pub fn advance(&mut self) -> &mut Self {
        let step = next_step(&self.chain, self.config, &*self.backend, None)
            .expect("scripted draft available");
        self.append(step);
        self
    }

    /// Scripts a plain (non-reflective, non-closing) step draft and
    /// advances the mirror.
    pub fn step(&mut self, text: &str) -> &mut Self {
        let template = self.template();
        assert!(
            !text.contains(&template.step_delimiter) && !text.contains(&template.think_close),
            "step text must not embed structural markers"
        );
        let prompt = step_prompt(&self.chain, template, None);
        self.backend.script_completion(&prompt, text);
        self.advance()
    }

    /// Scripts a draft at the current position without advancing; used
    /// for reflective drafts the pipeline will regenerate.
    pub fn script_draft(&mut self, text: &str) -> &mut Self {
        let prompt = step_prompt(&self.chain, self.template(), None);
        self.backend.script_completion(&prompt, text);
        self
    }

    /// Scripts the regeneration from `phrase` and advances the mirror the
    /// way the pipeline does after a reflective draft. The draft itself
    /// must already be scripted (explicitly or via the sampled base).
    pub fn inject(&mut self, phrase: &str, continuation: &str) -> &mut Self {
        let prompt = step_prompt(&self.chain, self.template(), Some(phrase));
        self.backend.script_completion(&prompt, continuation);
        let step = next_step(&self.chain, self.config, &*self.backend, Some(phrase))
            .expect("scripted regeneration available");
        self.append(step);
        self
    }

    /// Scripts a draft that closes the reasoning section after `fragment`
    /// and mirrors the kept fragment step.
    pub fn closing_step(&mut self, fragment: &str) -> &mut Self {
        assert!(!fragment.trim().is_empty(), "closing fragment must be non-empty");
        let template = self.template().clone();
        let prompt = step_prompt(&self.chain, &template, None);
        self.backend
            .script_completion(&prompt, &format!("{fragment}{}", template.think_close));
        let text = fragment.trim().to_string();
        let kind = if is_reflection_start(&text, &self.config.keywords) {
            StepKind::ReflectionStart
        } else {
            StepKind::Plain
        };
        let step = Step {
            index: self.chain.steps.len() + 1,
            text: text.clone(),
            kind,
            injected_phrase: None,
            token_count: word_count(&text),
        };
        self.append(step);
        self
    }

    /// Scripts the confidence probe for the current chain as a single
    /// indicative token carrying exactly `value`.
    pub fn probe(&mut self, value: f64) -> &mut Self {
        let prompt = probe_prompt(&self.chain, self.template(), &self.config.detector);
        self.backend
            .script_distribution(&prompt, vec![(" confident".into(), value)]);
        self
    }

    /// Scripts the answer elicitation for the current chain.
    pub fn elicit(&mut self, answer: &str) -> &mut Self {
        let prompt = answer_prompt(&self.chain, self.template());
        self.backend.script_completion(&prompt, answer);
        self
    }

    /// Scripts the summary generation for the current chain.
    pub fn summary(&mut self, text: &str) -> &mut Self {
        let prompt = summary_prompt(&self.chain, self.template());
        self.backend.script_completion(&prompt, text);
        self
    }
}

fn scripted_config() -> PipelineConfig {
    PipelineConfig {
        pool: PhrasePool::new(["Let's proceed"]).expect("singleton pool"),
        max_steps: 3,
        seed: 0,
        ..PipelineConfig::default()
    }
}

fn task(id: &str, question: &str, answer: &str, benchmark: &str) -> Task {
    let mut task = Task::new(id, question, Some(answer.into())).expect("valid task");
    task.meta.insert("benchmark".into(), benchmark.into());
    task
}

/// Six hand-traced construction scenarios covering the loop's branches:
///
/// | id | path                                                    | outcome   |
/// |----|---------------------------------------------------------|-----------|
/// | t1 | clean emit: two plain steps, second probe crosses       | emitted   |
/// | t2 | reflective draft suppressed by injection, then crosses  | emitted   |
/// | t3 | injection-resistant reflection kept (no re-injection)   | emitted   |
/// | t4 | crossing elicits a wrong answer, a later one verifies   | emitted   |
/// | t5 | close marker ends reasoning; terminal answer verifies   | emitted   |
/// | t6 | budget runs out and the terminal answer is wrong        | discarded |
///
/// Each task's script also answers two plain full-sample draws (seeds 0
/// and 1). t5's and t6's samples are both wrong, so t5 yields an SFT
/// record but no preference pair and t6 contributes nothing.
pub fn scripted_corpus() -> ScenarioSet {
    let config = scripted_config();
    let mut backend = ScriptedBackend::new();
    let tasks = vec![
        task("t1", "What is 6 times 7?", "42", "alpha"),
        task("t2", "What is 15 plus 4?", "19", "alpha"),
        task("t3", "What is 2 times 5?", "10", "alpha"),
        task("t4", "What is 9 minus 3?", "6", "beta"),
        task("t5", "What is 81 divided by 9?", "9", "beta"),
        task("t6", "What is 100 divided by 4?", "25", "beta"),
    ];

    // t1: plain, plain, stop at step 2.
    let mut w = ScriptWriter::new(&mut backend, &config, &tasks[0]);
    w.sampled_base(&[
        "First compute 6 times 7.\n\nWait, let me double-check the multiplication carefully.\n\n6 times 7 equals 42 indeed.\n\n</think>\nAfter checking, the final answer is \\boxed{42}.",
        "Hmm, 6 times 7 might be 43.\n\n</think>\nThe answer is \\boxed{43}.",
    ]);
    w.advance().probe(0.2);
    w.step("Six sevens make 42.").probe(0.9);
    w.elicit(" \\boxed{42}");
    w.summary("The final answer is \\boxed{42}.");

    // t2: reflective first draft, injected regeneration stays confident,
    // stop at step 1.
    let mut w = ScriptWriter::new(&mut backend, &config, &tasks[1]);
    w.sampled_base(&[
        "Wait, is 15 plus 4 really 19?\n\nAdding carefully: 15 plus 4 gives 19.\n\n</think>\nSo the result is \\boxed{19}.",
        "15 plus 4 equals 19.\n\n</think>\nThe result is \\boxed{19}.",
    ]);
    w.inject("Let's proceed", ", 15 plus 4 equals 19.").probe(0.7);
    w.elicit(" \\boxed{19}");
    w.summary("The sum is \\boxed{19}.");

    // t3: the regenerated step still reads like a reflection; it is kept
    // as-is — injection is attempted once per step, never repeated.
    let mut w = ScriptWriter::new(&mut backend, &config, &tasks[2]);
    w.sampled_base(&[
        "Compute 2 times 5 step by step.\n\nVerify once more that 2 times 5 is 10.\n\nCounting by twos five times also lands on 10.\n\n</think>\nThe product is \\boxed{10}.",
        "Maybe 2 times 5 is 12.\n\n</think>\nI get \\boxed{12}.",
    ]);
    w.advance().probe(0.3);
    w.script_draft("Wait, I should recheck that product.");
    w.inject("Let's proceed", ", but double-check: 2 times 5 is 10.").probe(0.8);
    w.elicit(" \\boxed{10}");
    w.summary("The product is \\boxed{10}.");

    // t4: the first crossing elicits a wrong answer and the loop keeps
    // going; the second crossing verifies.
    let mut w = ScriptWriter::new(&mut backend, &config, &tasks[3]);
    w.sampled_base(&[
        "Start from 9 and remove 3.\n\nCheck the subtraction on a number line.\n\n9 minus 3 is 6 for sure.\n\nLet me rethink whether borrowing matters here.\n\n</think>\nThe difference is \\boxed{6}.",
        "9 minus 3 equals 5.\n\n</think>\nThe difference is \\boxed{5}.",
    ]);
    w.advance().probe(0.6);
    w.elicit(" \\boxed{5}");
    w.step("Counting down: 9, 8, 7, 6.").probe(0.9);
    w.elicit(" \\boxed{6}");
    w.summary("The difference is \\boxed{6}.");

    // t5: close marker inside the second draft, terminal elicitation
    // verifies; both plain samples are wrong.
    let mut w = ScriptWriter::new(&mut backend, &config, &tasks[4]);
    w.sampled_base(&[
        "Dividing 81 by 9 now.\n\nMaybe the answer is 8.\n\n</think>\nI conclude \\boxed{8}.",
        "81 over 9 is 8.\n\n</think>\nSo \\boxed{8}.",
    ]);
    w.advance().probe(0.3);
    w.closing_step("Nine nines make 81, so the quotient is 9.");
    w.elicit(" \\boxed{9}");
    w.summary("The quotient is \\boxed{9}.");

    // t6: probes never cross, the step budget runs out, and the terminal
    // elicitation is wrong; the chain is discarded without a summary.
    let mut w = ScriptWriter::new(&mut backend, &config, &tasks[5]);
    w.sampled_base(&[
        "Does 4 go into 100 evenly?\n\nActually, is it 24?\n\n</think>\nI think it is \\boxed{24}.",
        "A quarter of 100 is 24.\n\n</think>\nSo \\boxed{24}.",
    ]);
    w.advance().probe(0.2);
    w.step("Four twenties make 80, leaving 20.").probe(0.3);
    w.step("Split the rest into 4 fives.").probe(0.45);
    w.elicit(" \\boxed{24}");

    ScenarioSet {
        tasks,
        backend,
        config,
        plain_samples_per_task: 2,
    }
}

/// The counters [`scripted_corpus`] is constructed to produce when built
/// with two plain samples per task.
pub fn expected_build_report() -> BuildReport {
    BuildReport {
        tasks_in: 6,
        emitted: 5,
        discarded: 1,
        preference_pairs: 4,
        skipped_no_correct_sample: 1,
        length_inversions: 0,
    }
}

/// A corpus of `n` addition tasks whose scripted verbose completions run
/// seven steps while construction stops after one, so the emitted chains
/// verify 100% and cut step tokens far more than 30%.
pub fn demo_corpus(n: usize) -> ScenarioSet {
    let config = scripted_config();
    let mut backend = ScriptedBackend::new();
    let mut tasks = Vec::with_capacity(n);
    for k in 0..n {
        let (a, b) = (k + 3, 2 * k + 5);
        let sum = a + b;
        let t = task(
            &format!("d{:02}", k + 1),
            &format!("What is {a} + {b}?"),
            &sum.to_string(),
            "demo",
        );
        let first = format!("Adding {a} and {b} gives {sum}.");
        let verbose = format!(
            "{first}\n\nWait, I should double-check that sum.\n\n{a} plus {b} is definitely {sum}.\n\nCheck the addition once more digit by digit.\n\nThe tens and ones both agree with {sum}.\n\nLet me verify the total a final time.\n\nYes, the total is {sum} for sure.\n\n</think>\nThe final answer is \\boxed{{{sum}}}."
        );
        let mut w = ScriptWriter::new(&mut backend, &config, &t);
        w.sampled_base(&[&verbose]);
        w.advance().probe(0.9);
        w.elicit(&format!(" \\boxed{{{sum}}}"));
        w.summary(&format!("The sum is \\boxed{{{sum}}}."));
        tasks.push(t);
    }
    ScenarioSet {
        tasks,
        backend,
        config,
        plain_samples_per_task: 1,
    }
}

/// `n` tasks of eight plain steps with pseudo-random probe values and a
/// ninth closing step, with elicitation and summary scripted at every
/// prefix, so decoding succeeds at any threshold. Returns the set plus
/// each task's probe trace in step order.
pub fn monotonicity_corpus(n: usize, seed: u64) -> (ScenarioSet, Vec<Vec<f64>>) {
    let config = PipelineConfig {
        pool: PhrasePool::new(["Let's proceed"]).expect("singleton pool"),
        max_steps: 16,
        seed,
        ..PipelineConfig::default()
    };
    let mut backend = ScriptedBackend::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for k in 0..n {
        let t = task(
            &format!("m{k:03}"),
            &format!("Trace question {k}?"),
            "0",
            "trace",
        );
        let mut w = ScriptWriter::new(&mut backend, &config, &t);
        let mut trace = Vec::with_capacity(8);
        for j in 1..=8 {
            w.step(&format!("Step {j} of trace {k}."));
            let value: f64 = rng.gen();
            trace.push(value);
            w.probe(value);
            w.elicit(" \\boxed{0}");
            w.summary("The answer is \\boxed{0}.");
        }
        w.closing_step(&format!("Closing out trace {k}."));
        w.elicit(" \\boxed{0}");
        w.summary("The answer is \\boxed{0}.");
        tasks.push(t);
        traces.push(trace);
    }
    (
        ScenarioSet {
            tasks,
            backend,
            config,
            plain_samples_per_task: 0,
        },
        traces,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Termination;
    use crate::dataset::assemble;
    use crate::pipeline::{
        build_concise_chain, concise_decode, sample_plain_chain, BuildStatus, ManifestRow,
    };
    use std::collections::BTreeMap;

    #[test]
    fn scripted_corpus_builds_to_the_expected_manifest() {
        let set = scripted_corpus();
        let outcomes: Vec<_> = set
            .tasks
            .iter()
            .map(|t| build_concise_chain(t, &set.config, &set.backend).unwrap())
            .collect();
        let rows: Vec<ManifestRow> = outcomes.iter().map(ManifestRow::from).collect();

        let expect = [
            ("t1", BuildStatus::Emitted, 2, 9, 0, Some(2), vec![0.2, 0.9]),
            ("t2", BuildStatus::Emitted, 1, 8, 1, Some(1), vec![0.7]),
            ("t3", BuildStatus::Emitted, 2, 17, 1, Some(2), vec![0.3, 0.8]),
            ("t4", BuildStatus::Emitted, 2, 12, 0, Some(2), vec![0.6, 0.9]),
            ("t5", BuildStatus::Emitted, 2, 14, 0, None, vec![0.3]),
            ("t6", BuildStatus::Discarded, 3, 18, 0, None, vec![0.2, 0.3, 0.45]),
        ];
        for (row, (id, status, steps, tokens, injections, stop, probes)) in
            rows.iter().zip(expect)
        {
            assert_eq!(row.id, id);
            assert_eq!(row.status, status, "{id}");
            assert_eq!(row.steps, steps, "{id}");
            assert_eq!(row.tokens, tokens, "{id}");
            assert_eq!(row.injections, injections, "{id}");
            assert_eq!(row.stop_step, stop, "{id}");
            assert_eq!(row.probes, probes, "{id}");
        }

        let terminations: Vec<_> = outcomes.iter().map(|o| o.chain.terminated).collect();
        assert_eq!(
            terminations,
            vec![
                Termination::EarlyStopped,
                Termination::EarlyStopped,
                Termination::EarlyStopped,
                Termination::EarlyStopped,
                Termination::NaturalEnd,
                Termination::Discarded,
            ]
        );
        // t3's kept regeneration still reads like a reflection but was
        // injected exactly once.
        let t3 = &outcomes[2].chain.steps[1];
        assert_eq!(t3.kind, crate::chain::StepKind::Injected);
        assert!(t3.text.contains("double-check"));
        assert_eq!(outcomes[2].injections, 1);
    }

    #[test]
    fn scripted_corpus_assembles_to_the_expected_report() {
        let set = scripted_corpus();
        let outcomes: Vec<_> = set
            .tasks
            .iter()
            .map(|t| build_concise_chain(t, &set.config, &set.backend).unwrap())
            .collect();
        let mut plain = BTreeMap::new();
        for task in &set.tasks {
            let samples: Vec<_> =
                sample_plain_chain(task, set.plain_samples_per_task, 1.0, &set.config, &set.backend)
                    .into_iter()
                    .map(|s| s.unwrap())
                    .collect();
            plain.insert(task.id.clone(), samples);
        }
        let bundle = assemble(&outcomes, &plain, &set.config.template);
        assert_eq!(bundle.report, expected_build_report());
        assert_eq!(bundle.sft.len(), 5);
        let answers: Vec<_> = bundle.sft.iter().map(|r| r.answer.as_str()).collect();
        assert_eq!(answers, vec!["42", "19", "10", "6", "9"]);
        let pair_ids: Vec<_> = bundle.preference.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(pair_ids, vec!["t1", "t2", "t3", "t4"]);
        for pair in &bundle.preference {
            assert!(pair.chosen_tokens < pair.rejected_tokens, "{}", pair.id);
        }
    }

    #[test]
    fn demo_corpus_compresses_and_verifies_everywhere() {
        let set = demo_corpus(5);
        let mut concise_tokens = 0usize;
        let mut verbose_tokens = 0usize;
        for task in &set.tasks {
            let outcome = build_concise_chain(task, &set.config, &set.backend).unwrap();
            assert_eq!(outcome.status, BuildStatus::Emitted, "{}", task.id);
            let sample = sample_plain_chain(task, 1, 1.0, &set.config, &set.backend)
                .remove(0)
                .unwrap();
            assert!(sample.correct, "{}", task.id);
            concise_tokens += outcome.chain.total_step_tokens();
            verbose_tokens += sample.chain.total_step_tokens();
        }
        assert!(
            (concise_tokens as f64) < 0.7 * verbose_tokens as f64,
            "{concise_tokens} vs {verbose_tokens}"
        );
    }

    #[test]
    fn monotonicity_corpus_decodes_at_every_threshold() {
        let (set, traces) = monotonicity_corpus(4, 7);
        for threshold in [0.4, 0.5, 0.6, 0.7] {
            let mut config = set.config.clone();
            config.detector.threshold = threshold;
            for (task, trace) in set.tasks.iter().zip(&traces) {
                let chain = concise_decode(task, &config, &set.backend).unwrap();
                let expected_stop = trace.iter().position(|&p| p > threshold).map(|i| i + 1);
                match expected_stop {
                    Some(ordinal) => {
                        assert_eq!(chain.terminated, Termination::EarlyStopped, "{}", task.id);
                        assert_eq!(chain.steps.len(), ordinal, "{}", task.id);
                    }
                    None => {
                        assert_eq!(chain.terminated, Termination::NaturalEnd, "{}", task.id);
                        assert_eq!(chain.steps.len(), 9, "{}", task.id);
                    }
                }
            }
        }
    }
}
