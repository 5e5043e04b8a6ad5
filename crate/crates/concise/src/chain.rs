//! Reasoning-chain data model: tasks, steps, chains, and prompt rendering.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Placeholder substituted with the task question when rendering prompts.
pub const QUESTION_PLACEHOLDER: &str = "{question}";

/// Errors raised by chain construction.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    /// The chain has already terminated and cannot grow.
    #[error("chain is closed (terminated = {0:?})")]
    ChainClosed(Termination),
    /// A step's index does not extend the chain by exactly one.
    #[error("step index {got} does not extend a chain of {len} steps")]
    IndexGap { got: usize, len: usize },
    /// A task failed validation.
    #[error("invalid task: {0}")]
    InvalidTask(String),
}

/// A single question to reason about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    /// Corpus-unique identifier.
    pub id: String,
    /// The problem statement.
    pub question: String,
    /// Reference answer; absent for decode-only corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    /// Free-form labels (e.g. a `benchmark` key used to group reports).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Task {
    /// Builds a validated task: `id` and `question` must be non-empty.
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        ground_truth: Option<String>,
    ) -> Result<Self, ChainError> {
        let task = Task {
            id: id.into(),
            question: question.into(),
            ground_truth,
            meta: BTreeMap::new(),
        };
        task.validate()?;
        Ok(task)
    }

    /// Checks the non-emptiness invariants (useful after deserialization).
    pub fn validate(&self) -> Result<(), ChainError> {
        if self.id.trim().is_empty() {
            return Err(ChainError::InvalidTask("empty id".into()));
        }
        if self.question.trim().is_empty() {
            return Err(ChainError::InvalidTask(format!(
                "task {:?} has an empty question",
                self.id
            )));
        }
        Ok(())
    }
}

/// What role a step plays in the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Ordinary forward reasoning.
    Plain,
    /// The step opens a reflection (re-checking earlier work).
    ReflectionStart,
    /// The step was regenerated behind an injected confidence phrase.
    Injected,
    /// An explicit answer statement.
    Answer,
    /// Post-reasoning summary text.
    Summary,
}

/// One reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position in the chain.
    #[serde(rename = "i")]
    pub index: usize,
    /// The step text, delimiter-free.
    pub text: String,
    /// Classification of the step.
    pub kind: StepKind,
    /// The confidence phrase behind an injected step.
    #[serde(rename = "phrase", default, skip_serializing_if = "Option::is_none")]
    pub injected_phrase: Option<String>,
    /// Backend-consistent token count recorded at generation time.
    #[serde(rename = "tokens", default)]
    pub token_count: usize,
}

/// Why (and whether) a chain stopped growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Still under construction.
    Open,
    /// The confidence probe cleared the threshold and the answer was elicited.
    EarlyStopped,
    /// The model closed its own reasoning (end marker or empty continuation).
    NaturalEnd,
    /// Step or token budget ran out.
    BudgetExhausted,
    /// The chain failed verification and was dropped from emission.
    Discarded,
}

/// A reasoning chain under construction or as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    /// The task being solved.
    #[serde(flatten)]
    pub task: Task,
    /// Steps in order; indices are 1-based and contiguous.
    pub steps: Vec<Step>,
    /// First step at which the final answer is derived, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fas_index: Option<usize>,
    /// Post-reasoning summary, present once a verified chain is emitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    /// The elicited (or extracted) final answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    /// Terminal state of the chain.
    pub terminated: Termination,
}

impl ReasoningChain {
    /// Starts an open, empty chain for `task`.
    pub fn new(task: Task) -> Self {
        ReasoningChain {
            task,
            steps: Vec::new(),
            fas_index: None,
            summary: None,
            final_answer: None,
            terminated: Termination::Open,
        }
    }

    /// Whether the chain can still grow.
    pub fn is_open(&self) -> bool {
        self.terminated == Termination::Open
    }

    /// Appends `step`, requiring an open chain and a contiguous index.
    pub fn append_step(mut self, step: Step) -> Result<Self, ChainError> {
        if !self.is_open() {
            return Err(ChainError::ChainClosed(self.terminated));
        }
        if step.index != self.steps.len() + 1 {
            return Err(ChainError::IndexGap {
                got: step.index,
                len: self.steps.len(),
            });
        }
        self.steps.push(step);
        Ok(self)
    }

    /// Sum of recorded per-step token counts (the summary is not included).
    pub fn total_step_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.token_count).sum()
    }

    /// Renders the generation prompt for this chain.
    ///
    /// Layout: substituted preamble, the think-open marker, a newline, then
    /// the steps joined by the step delimiter — no trailing delimiter. An
    /// `injection` is appended after the last step (delimiter-separated) so
    /// generation continues directly from the injected phrase.
    pub fn render_prompt(&self, template: &PromptTemplate, injection: Option<&str>) -> String {
        let mut prompt = template.base_prompt(&self.task.question);
        let mut first = true;
        for step in &self.steps {
            if !first {
                prompt.push_str(&template.step_delimiter);
            }
            prompt.push_str(&step.text);
            first = false;
        }
        if let Some(phrase) = injection {
            if !first {
                prompt.push_str(&template.step_delimiter);
            }
            prompt.push_str(phrase);
        }
        prompt
    }

    /// The full response text a trained model should produce: steps joined
    /// by the delimiter, then the think-close marker and the summary when
    /// one is present.
    pub fn response_text(&self, template: &PromptTemplate) -> String {
        let mut out = self
            .steps
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(&template.step_delimiter);
        if let Some(summary) = &self.summary {
            if !out.is_empty() {
                out.push_str(&template.step_delimiter);
            }
            out.push_str(&template.think_close);
            out.push('\n');
            out.push_str(summary);
        }
        out
    }
}

/// Prompt scaffolding shared by every generation call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    /// Instruction text containing [`QUESTION_PLACEHOLDER`].
    pub preamble: String,
    /// Marker opening the reasoning section.
    pub think_open: String,
    /// Separator between reasoning steps.
    pub step_delimiter: String,
    /// Marker closing the reasoning section.
    pub think_close: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            preamble: "Solve the following problem step by step. \
                       Put your final answer within \\boxed{}.\nProblem: {question}\n"
                .into(),
            think_open: "<think>".into(),
            step_delimiter: "\n\n".into(),
            think_close: "</think>".into(),
        }
    }
}

impl PromptTemplate {
    /// The prompt for an empty chain: substituted preamble plus the opened
    /// reasoning section.
    pub fn base_prompt(&self, question: &str) -> String {
        let mut prompt = self.preamble.replace(QUESTION_PLACEHOLDER, question);
        prompt.push_str(&self.think_open);
        prompt.push('\n');
        prompt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> Task {
        Task::new("t1", "What is 2 + 3?", Some("5".into())).unwrap()
    }

    fn step(index: usize, text: &str) -> Step {
        Step {
            index,
            text: text.into(),
            kind: StepKind::Plain,
            injected_phrase: None,
            token_count: text.split_whitespace().count(),
        }
    }

    #[test]
    fn append_extends_open_chain() {
        let chain = ReasoningChain::new(task());
        let chain = chain.append_step(step(1, "A")).unwrap();
        let chain = chain.append_step(step(2, "B")).unwrap();
        assert_eq!(chain.steps.len(), 2);
        assert_eq!(chain.steps[1].text, "B");
    }

    #[test]
    fn append_rejects_index_gap() {
        let chain = ReasoningChain::new(task());
        let err = chain.append_step(step(3, "A")).unwrap_err();
        assert_eq!(err, ChainError::IndexGap { got: 3, len: 0 });
    }

    #[test]
    fn append_rejects_closed_chain() {
        let mut chain = ReasoningChain::new(task());
        chain.terminated = Termination::EarlyStopped;
        let err = chain.append_step(step(1, "A")).unwrap_err();
        assert_eq!(err, ChainError::ChainClosed(Termination::EarlyStopped));
    }

    #[test]
    fn render_empty_chain_is_base_prompt() {
        let chain = ReasoningChain::new(task());
        let tmpl = PromptTemplate::default();
        let prompt = chain.render_prompt(&tmpl, None);
        assert!(prompt.contains("What is 2 + 3?"));
        assert!(prompt.ends_with("<think>\n"));
        assert!(!prompt.contains(QUESTION_PLACEHOLDER));
    }

    #[test]
    fn render_joins_steps_without_trailing_delimiter() {
        let tmpl = PromptTemplate::default();
        let chain = ReasoningChain::new(task())
            .append_step(step(1, "A"))
            .unwrap()
            .append_step(step(2, "B"))
            .unwrap();
        let base = tmpl.base_prompt("What is 2 + 3?");
        assert_eq!(chain.render_prompt(&tmpl, None), format!("{base}A\n\nB"));
    }

    #[test]
    fn render_appends_injection_after_last_step() {
        let tmpl = PromptTemplate::default();
        let chain = ReasoningChain::new(task()).append_step(step(1, "A")).unwrap();
        let base = tmpl.base_prompt("What is 2 + 3?");
        assert_eq!(
            chain.render_prompt(&tmpl, Some("Let's proceed")),
            format!("{base}A\n\nLet's proceed")
        );
        let empty = ReasoningChain::new(task());
        assert_eq!(
            empty.render_prompt(&tmpl, Some("Therefore")),
            format!("{base}Therefore")
        );
    }

    #[test]
    fn render_is_prefix_monotone() {
        // Rendering a chain extends the rendering of every prefix.
        let tmpl = PromptTemplate::default();
        let mut chain = ReasoningChain::new(task());
        let mut previous = chain.render_prompt(&tmpl, None);
        for (i, text) in ["A", "B longer step", "C"].iter().enumerate() {
            chain = chain.append_step(step(i + 1, text)).unwrap();
            let current = chain.render_prompt(&tmpl, None);
            assert!(current.starts_with(&previous));
            previous = current;
        }
    }

    #[test]
    fn response_text_includes_close_and_summary() {
        let tmpl = PromptTemplate::default();
        let mut chain = ReasoningChain::new(task())
            .append_step(step(1, "A"))
            .unwrap()
            .append_step(step(2, "B"))
            .unwrap();
        chain.summary = Some("The answer is 5.".into());
        assert_eq!(
            chain.response_text(&tmpl),
            "A\n\nB\n\n</think>\nThe answer is 5."
        );
        chain.summary = None;
        assert_eq!(chain.response_text(&tmpl), "A\n\nB");
    }

    #[test]
    fn chain_serialization_round_trips() {
        let mut chain = ReasoningChain::new(task())
            .append_step(step(1, "First I compute 2 + 3."))
            .unwrap();
        chain.steps[0].kind = StepKind::Injected;
        chain.steps[0].injected_phrase = Some("Let's proceed".into());
        chain.summary = Some("The answer is 5.".into());
        chain.final_answer = Some("\\boxed{5}".into());
        chain.fas_index = Some(1);
        chain.terminated = Termination::EarlyStopped;

        let json = serde_json::to_string(&chain).unwrap();
        let back: ReasoningChain = serde_json::from_str(&json).unwrap();
        assert_eq!(back, chain);

        // Flattened task fields appear at the top level.
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["id"], "t1");
        assert_eq!(value["steps"][0]["i"], 1);
        assert_eq!(value["steps"][0]["phrase"], "Let's proceed");
        assert_eq!(value["terminated"], "early_stopped");
    }

    #[test]
    fn task_validation_rejects_empty_fields() {
        assert!(Task::new("", "q", None).is_err());
        assert!(Task::new("id", "  ", None).is_err());
    }
}
