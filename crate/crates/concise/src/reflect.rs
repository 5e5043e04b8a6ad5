//! Reflection-step detection: keyword rule, judge prompt construction,
//! judge-output parsing, and rule-based chain annotation.

use crate::answer::extract_answer;
use crate::chain::{ReasoningChain, Task, Termination};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::sync::LazyLock;
use thiserror::Error;

/// Default reflection-signal keywords, matched case-insensitively as
/// substrings (so "check" also fires on "double-check").
pub const DEFAULT_KEYWORDS: [&str; 14] = [
    "wait",
    "alternatively",
    "check",
    "reconsider",
    "reflect",
    "rethink",
    "reconsidering",
    "reviewing",
    "reassess",
    "pause",
    "second thought",
    "reevaluate",
    "verify",
    "think again",
];

/// Errors from reflection detection and annotation.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReflectError {
    /// A keyword set must contain at least one keyword.
    #[error("keyword set is empty")]
    EmptyKeywords,
    /// The operation needs at least one step.
    #[error("chain has no steps")]
    EmptyChain,
    /// The operation needs a terminated chain.
    #[error("chain is still open")]
    ChainOpen,
    /// Neither the chain nor its final answer locates a first-answer step.
    #[error("first answer step cannot be determined")]
    FasUnknown,
    /// Judge output could not be parsed; `span` shows the offending region.
    #[error("judge output parse failure at {span:?}")]
    ParseFailure { span: String },
    /// An annotation violates its structural invariants.
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
}

/// A non-empty set of lowercase reflection keywords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct KeywordSet {
    keywords: Vec<String>,
}

impl KeywordSet {
    /// Builds a set, lowercasing and rejecting empty input.
    pub fn new<I, S>(keywords: I) -> Result<Self, ReflectError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let keywords: Vec<String> = keywords
            .into_iter()
            .map(|k| k.into().trim().to_lowercase())
            .filter(|k| !k.is_empty())
            .collect();
        if keywords.is_empty() {
            return Err(ReflectError::EmptyKeywords);
        }
        Ok(KeywordSet { keywords })
    }

    /// The keywords, lowercase, in construction order.
    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }
}

impl Default for KeywordSet {
    fn default() -> Self {
        KeywordSet::new(DEFAULT_KEYWORDS).expect("default keywords are non-empty")
    }
}

impl TryFrom<Vec<String>> for KeywordSet {
    type Error = ReflectError;
    fn try_from(keywords: Vec<String>) -> Result<Self, ReflectError> {
        KeywordSet::new(keywords)
    }
}

impl From<KeywordSet> for Vec<String> {
    fn from(set: KeywordSet) -> Vec<String> {
        set.keywords
    }
}

/// Whether `step_text` opens a reflection: any keyword occurs as a
/// case-insensitive substring.
pub fn is_reflection_start(step_text: &str, keywords: &KeywordSet) -> bool {
    let lower = step_text.to_lowercase();
    keywords.keywords.iter().any(|k| lower.contains(k.as_str()))
}

/// A judge's (or the rule detector's) view of a chain: reflection step
/// groups plus the first step at which the final answer is derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeAnnotation {
    /// Groups of 1-based step indices; each group is a contiguous,
    /// strictly increasing run, and groups are disjoint.
    pub reflection_groups: Vec<Vec<usize>>,
    /// 1-based first-answer step.
    pub fas_index: usize,
}

impl JudgeAnnotation {
    /// Validates and builds an annotation.
    pub fn new(reflection_groups: Vec<Vec<usize>>, fas_index: usize) -> Result<Self, ReflectError> {
        if fas_index == 0 {
            return Err(ReflectError::InvalidAnnotation(
                "first answer step must be ≥ 1".into(),
            ));
        }
        let mut seen = HashSet::new();
        for group in &reflection_groups {
            if group.is_empty() {
                return Err(ReflectError::InvalidAnnotation("empty reflection group".into()));
            }
            for window in group.windows(2) {
                if window[1] != window[0] + 1 {
                    return Err(ReflectError::InvalidAnnotation(format!(
                        "group {group:?} is not a contiguous increasing run"
                    )));
                }
            }
            for &index in group {
                if index == 0 {
                    return Err(ReflectError::InvalidAnnotation("step index 0".into()));
                }
                if !seen.insert(index) {
                    return Err(ReflectError::InvalidAnnotation(format!(
                        "step {index} appears in more than one group"
                    )));
                }
            }
        }
        Ok(JudgeAnnotation {
            reflection_groups,
            fas_index,
        })
    }

    /// All annotated reflection step indices.
    pub fn reflection_steps(&self) -> HashSet<usize> {
        self.reflection_groups.iter().flatten().copied().collect()
    }
}

/// Instruction template sent to a judge model. `{question}` and
/// `{response}` are substituted by [`build_judge_prompt`].
pub const JUDGE_PROMPT_TEMPLATE: &str = "\
You are an AI assistant trained to analyze reasoning steps in a response. Your task has two parts:
1. Examine each reasoning step to determine if it's part of a reflection process.
2. Identify the earliest step where the final answer (as later shown in boxed{}) is first derived, regardless of whether it is formally written or boxed at that moment.

### [Definition of Reflection]:
1. A reflection process is a sequence of one or more reasoning steps that recheck or doubt a previously made conclusion, such as double-checking calculations, using alternative methods.
2. Typical signals include (but are not limited to): 'Wait', 'Alternatively', 'Just to double check', 'But hold on', etc. These signals usually mean the start of a new reflection process.
3. However, even without such phrases, if the content of a step reflects a verification or reevaluation, it should be marked as a part of a reflection process.

### [Output Format]:
1. **Reflection Step**: List all reflection processes as groups of steps.
    - If Step3 and Step4 form a reflection, write as (Step3, Step4)
    - If Step5, Step6, Step7 form a new reflection process together, list as a separate group: [(Step3, Step4), (Step5, Step6, Step7)]
    - Avoid putting a lot of steps into one single reflection process.
2. **First Answer Step**: Write the earliest step where the final answer is first derived(e.g., Step2).

### [Example]:
Question: 2 + 3 = ?
Response:
Step1: I start with 2 + 3.
Step2: That gives me 5.
Step3: Wait, is that right? Let me make sure...
Step4: But hold on, let me double-check. Maybe I should...
Step5: Wait, no, I think...
Step6: Therefore, the result is 5
Step7: Alternatively, if I use...
Step8: So, the answer is 5
Step9: **Final Answer**: the answer is boxed{5}.
Output:
Reflection Step: [(Step3), (Step4), (Step5, Step6), (Step7, Step8)]
First Correct Step: Step2
Explanations for Reflection Step:
- There is 'wait', a reflection keyword, in Step3, so Step3 is the start of a reflection process.
- There is 'But hold on' in step4, so step4 means the start of a new reflection process.
- Then, there is 'wait' in step5, so step5 means the start of a new reflection process.
- There is 'therefore' in step6, so (step5,step6) is in the same refleciton process.
- There is 'alternatively' in step7, so step7 is the start of a new reflection process.
- There is 'so' in step8, so (step7,step8) is in the same reflection process.

### [Task]:
Now analyze the following question and response:
Question: {question}
Response: {response}
Please output the reflection steps and the first correct step in the format without extra explanation.
";

static STEP_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bstep\s*\d+\s*:").expect("static regex"));

/// Indices of steps whose own text contains a `StepN:`-style label, which
/// a judge could misread as a step boundary.
pub fn step_label_collisions(chain: &ReasoningChain) -> Vec<usize> {
    chain
        .steps
        .iter()
        .filter(|s| STEP_LABEL.is_match(&s.text))
        .map(|s| s.index)
        .collect()
}

/// Renders the judge prompt for `chain`: the instruction template with the
/// question and a `Step1: … Step2: …` listing substituted. Step text passes
/// through unescaped; label-like text inside a step is logged as a warning.
pub fn build_judge_prompt(task: &Task, chain: &ReasoningChain) -> Result<String, ReflectError> {
    if chain.steps.is_empty() {
        return Err(ReflectError::EmptyChain);
    }
    for index in step_label_collisions(chain) {
        log::warn!(
            "task {}: step {} contains a step-label pattern; judge numbering may drift",
            task.id,
            index
        );
    }
    let response = chain
        .steps
        .iter()
        .map(|s| format!("Step{}: {}", s.index, s.text))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(JUDGE_PROMPT_TEMPLATE
        .replace("{question}", &task.question)
        .replace("{response}", &response))
}

static GROUPS_BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)reflection\s+steps?\s*:?\s*\[(.*?)\]").expect("static regex"));
static GROUP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([^()]*)\)").expect("static regex"));
static STEP_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)step\s*(\d+)").expect("static regex"));
static BARE_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("static regex"));
static FAS_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)first\s+(?:answer|correct)\s+step\s*:?\s*(?:step\s*)?(\d+)")
        .expect("static regex")
});

fn numbers_in(span: &str) -> Vec<usize> {
    let stepped: Vec<usize> = STEP_NUMBER
        .captures_iter(span)
        .filter_map(|c| c[1].parse().ok())
        .collect();
    if !stepped.is_empty() {
        return stepped;
    }
    BARE_NUMBER
        .find_iter(span)
        .filter_map(|m| m.as_str().parse().ok())
        .collect()
}

/// Parses raw judge output into an annotation.
///
/// Tolerates surrounding prose, bare or `StepN`-labelled indices, and both
/// `First Answer Step` and `First Correct Step` labels (judges emit both).
pub fn parse_judge_output(raw: &str) -> Result<JudgeAnnotation, ReflectError> {
    let block = GROUPS_BLOCK
        .captures(raw)
        .ok_or_else(|| ReflectError::ParseFailure {
            span: "Reflection Step: [...]".into(),
        })?;
    let inner = &block[1];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut saw_parens = false;
    for group in GROUP.captures_iter(inner) {
        saw_parens = true;
        let numbers = numbers_in(&group[1]);
        if numbers.is_empty() {
            return Err(ReflectError::ParseFailure {
                span: group[0].to_string(),
            });
        }
        groups.push(numbers);
    }
    if !saw_parens && !inner.trim().is_empty() {
        // Ungrouped listing such as "[Step4, Step7]": singleton groups.
        groups = numbers_in(inner).into_iter().map(|n| vec![n]).collect();
        if groups.is_empty() {
            return Err(ReflectError::ParseFailure {
                span: inner.trim().to_string(),
            });
        }
    }
    let fas = FAS_LABEL
        .captures(raw)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| ReflectError::ParseFailure {
            span: "First Answer Step: StepN".into(),
        })?;
    JudgeAnnotation::new(groups, fas).map_err(|e| ReflectError::ParseFailure {
        span: e.to_string(),
    })
}

/// Formats an annotation in the canonical output shape accepted by
/// [`parse_judge_output`].
pub fn format_annotation(annotation: &JudgeAnnotation) -> String {
    let groups = annotation
        .reflection_groups
        .iter()
        .map(|group| {
            let members = group
                .iter()
                .map(|i| format!("Step{i}"))
                .collect::<Vec<_>>()
                .join(", ");
            format!("({members})")
        })
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "Reflection Step: [{groups}]\nFirst Answer Step: Step{}",
        annotation.fas_index
    )
}

/// Annotates a terminated chain without a judge: every keyword-flagged
/// step becomes a singleton reflection group, and the first-answer step is
/// the chain's recorded `fas_index` or else the first step whose text
/// contains the extracted final answer.
pub fn annotate_rule_based(
    chain: &ReasoningChain,
    keywords: &KeywordSet,
) -> Result<JudgeAnnotation, ReflectError> {
    if chain.terminated == Termination::Open {
        return Err(ReflectError::ChainOpen);
    }
    let groups: Vec<Vec<usize>> = chain
        .steps
        .iter()
        .filter(|s| is_reflection_start(&s.text, keywords))
        .map(|s| vec![s.index])
        .collect();
    let fas = chain.fas_index.or_else(|| {
        let answer = extract_answer(chain.final_answer.as_deref()?);
        if answer.is_empty() {
            return None;
        }
        chain
            .steps
            .iter()
            .find(|s| s.text.contains(&answer))
            .map(|s| s.index)
    });
    let fas = fas.ok_or(ReflectError::FasUnknown)?;
    JudgeAnnotation::new(groups, fas)
}

/// Annotation as persisted to JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    /// Task id the annotation belongs to.
    pub id: String,
    /// Reflection groups (1-based step indices).
    pub groups: Vec<Vec<usize>>,
    /// First-answer step.
    pub fas: usize,
    /// Which detector produced the annotation.
    pub source: AnnotationSource,
    /// Set when the annotated chain exceeded the judge reliability cap.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unreliable: bool,
}

/// Annotation provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    /// Keyword rule.
    Rule,
    /// LLM judge.
    Judge,
}

impl AnnotationRecord {
    /// Wraps an annotation for persistence.
    pub fn new(id: impl Into<String>, annotation: &JudgeAnnotation, source: AnnotationSource) -> Self {
        AnnotationRecord {
            id: id.into(),
            groups: annotation.reflection_groups.clone(),
            fas: annotation.fas_index,
            source,
            unreliable: false,
        }
    }

    /// Recovers the validated annotation.
    pub fn annotation(&self) -> Result<JudgeAnnotation, ReflectError> {
        JudgeAnnotation::new(self.groups.clone(), self.fas)
    }
}
