//! Dataset assembly: supervised fine-tuning records from emitted chains
//! and preference pairs that contrast them with verbose correct samples.

use crate::answer::extract_answer;
use crate::chain::PromptTemplate;
use crate::pipeline::{BuildOutcome, BuildStatus, PlainSample};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One supervised fine-tuning example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    /// Task id.
    pub id: String,
    /// The raw question.
    pub question: String,
    /// Full target response: steps, close marker, summary.
    pub target: String,
    /// Extracted final answer.
    pub answer: String,
    /// Sum of per-step token counts.
    pub tokens: usize,
}

/// One preference pair: the concise chain is preferred over a verbose
/// correct sample for the same task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    /// Task id.
    pub id: String,
    /// Generation prompt both responses continue from.
    pub prompt: String,
    /// Preferred (concise) response text.
    pub chosen: String,
    /// Dispreferred (verbose) response text.
    pub rejected: String,
    /// Step tokens of the chosen response.
    pub chosen_tokens: usize,
    /// Step tokens of the rejected response.
    pub rejected_tokens: usize,
}

/// Counters describing one assembly run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildReport {
    /// Construction outcomes consumed.
    pub tasks_in: usize,
    /// Chains that verified and became SFT records.
    pub emitted: usize,
    /// Chains dropped during construction.
    pub discarded: usize,
    /// Preference pairs produced.
    pub preference_pairs: usize,
    /// Emitted chains with no correct verbose sample to pair against.
    pub skipped_no_correct_sample: usize,
    /// Pairs whose chosen side was not shorter than its rejected side.
    pub length_inversions: usize,
}

/// Assembled datasets plus their report.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    /// Supervised fine-tuning records, in outcome order.
    pub sft: Vec<SftRecord>,
    /// Preference pairs, in outcome order.
    pub preference: Vec<PreferenceRecord>,
    /// Assembly counters.
    pub report: BuildReport,
}

/// The verbose sample to reject: the longest correct one, first on ties.
pub fn longest_correct(samples: &[PlainSample]) -> Option<&PlainSample> {
    samples
        .iter()
        .filter(|s| s.correct)
        .fold(None, |best: Option<&PlainSample>, s| match best {
            Some(b) if s.chain.total_step_tokens() > b.chain.total_step_tokens() => Some(s),
            Some(b) => Some(b),
            None => Some(s),
        })
}

/// Assembles SFT records and preference pairs from construction outcomes
/// and per-task verbose samples (keyed by task id).
pub fn assemble(
    outcomes: &[BuildOutcome],
    plain: &BTreeMap<String, Vec<PlainSample>>,
    template: &PromptTemplate,
) -> DatasetBundle {
    let mut sft = Vec::new();
    let mut preference = Vec::new();
    let mut report = BuildReport {
        tasks_in: outcomes.len(),
        ..BuildReport::default()
    };

    for outcome in outcomes {
        if outcome.status == BuildStatus::Discarded {
            report.discarded += 1;
            continue;
        }
        report.emitted += 1;
        let chain = &outcome.chain;
        let raw_answer = chain.final_answer.clone().unwrap_or_default();
        sft.push(SftRecord {
            id: chain.task.id.clone(),
            question: chain.task.question.clone(),
            target: chain.response_text(template),
            answer: extract_answer(&raw_answer),
            tokens: chain.total_step_tokens(),
        });

        let rejected = plain
            .get(&chain.task.id)
            .and_then(|samples| longest_correct(samples));
        match rejected {
            Some(sample) => {
                let chosen_tokens = chain.total_step_tokens();
                let rejected_tokens = sample.chain.total_step_tokens();
                if chosen_tokens >= rejected_tokens {
                    report.length_inversions += 1;
                }
                preference.push(PreferenceRecord {
                    id: chain.task.id.clone(),
                    prompt: template.base_prompt(&chain.task.question),
                    chosen: chain.response_text(template),
                    rejected: sample.chain.response_text(template),
                    chosen_tokens,
                    rejected_tokens,
                });
                report.preference_pairs += 1;
            }
            None => report.skipped_no_correct_sample += 1,
        }
    }

    DatasetBundle {
        sft,
        preference,
        report,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ReasoningChain, Step, StepKind, Task, Termination};
    use crate::pipeline::BuildOutcome;

    fn step(index: usize, text: &str, tokens: usize) -> Step {
        Step {
            index,
            text: text.into(),
            kind: StepKind::Plain,
            injected_phrase: None,
            token_count: tokens,
        }
    }

    fn chain(id: &str, steps: &[(&str, usize)], answer: &str) -> ReasoningChain {
        let task = Task::new(id, "What is 3 + 4?", Some("7".into())).unwrap();
        let mut chain = ReasoningChain::new(task);
        for (i, (text, tokens)) in steps.iter().enumerate() {
            chain = chain.append_step(step(i + 1, text, *tokens)).unwrap();
        }
        chain.final_answer = Some(answer.into());
        chain.summary = Some("The answer is 7.".into());
        chain.terminated = Termination::EarlyStopped;
        chain
    }

    fn emitted(chain: ReasoningChain) -> BuildOutcome {
        BuildOutcome {
            status: BuildStatus::Emitted,
            chain,
            probes: vec![],
            injections: 0,
            stop_step: Some(1),
            summary_truncated: false,
            error: None,
        }
    }

    fn plain_sample(id: &str, tokens: usize, correct: bool) -> PlainSample {
        let mut c = chain(id, &[("long derivation", tokens)], "\\boxed{7}");
        c.terminated = Termination::NaturalEnd;
        PlainSample { chain: c, correct }
    }

    #[test]
    fn longest_correct_prefers_length_then_first() {
        let samples = vec![
            plain_sample("a", 5, true),
            plain_sample("a", 9, false),
            plain_sample("a", 8, true),
            plain_sample("a", 8, true),
        ];
        let best = longest_correct(&samples).unwrap();
        assert_eq!(best.chain.total_step_tokens(), 8);
        // First of the 8-token ties: identical here, but pointer identity
        // pins the fold direction.
        assert!(std::ptr::eq(best, &samples[2]));
        assert!(longest_correct(&[plain_sample("a", 4, false)]).is_none());
    }

    #[test]
    fn assemble_produces_records_pairs_and_counters() {
        let template = PromptTemplate::default();
        let outcomes = vec![
            emitted(chain("t1", &[("3 + 4 = 7.", 4)], " \\boxed{7}")),
            BuildOutcome {
                status: BuildStatus::Discarded,
                chain: chain("t2", &[], ""),
                probes: vec![],
                injections: 0,
                stop_step: None,
                summary_truncated: false,
                error: None,
            },
            emitted(chain("t3", &[("quick check", 2)], "7")),
        ];
        let mut plain = BTreeMap::new();
        plain.insert("t1".to_string(), vec![plain_sample("t1", 40, true)]);
        plain.insert("t3".to_string(), vec![plain_sample("t3", 12, false)]);

        let bundle = assemble(&outcomes, &plain, &template);
        assert_eq!(bundle.report.tasks_in, 3);
        assert_eq!(bundle.report.emitted, 2);
        assert_eq!(bundle.report.discarded, 1);
        assert_eq!(bundle.report.preference_pairs, 1);
        assert_eq!(bundle.report.skipped_no_correct_sample, 1);
        assert_eq!(bundle.report.length_inversions, 0);

        assert_eq!(bundle.sft.len(), 2);
        assert_eq!(bundle.sft[0].id, "t1");
        assert_eq!(bundle.sft[0].answer, "7");
        assert_eq!(bundle.sft[0].tokens, 4);
        assert!(bundle.sft[0].target.starts_with("3 + 4 = 7."));
        assert!(bundle.sft[0].target.contains("</think>"));
        assert!(bundle.sft[0].target.ends_with("The answer is 7."));

        let pair = &bundle.preference[0];
        assert_eq!(pair.id, "t1");
        assert!(pair.prompt.contains("What is 3 + 4?"));
        assert!(pair.prompt.trim_end().ends_with("<think>"));
        assert_eq!(pair.chosen_tokens, 4);
        assert_eq!(pair.rejected_tokens, 40);
        assert_ne!(pair.chosen, pair.rejected);
    }

    #[test]
    fn assemble_counts_length_inversions() {
        let template = PromptTemplate::default();
        let outcomes = vec![emitted(chain("t1", &[("a long concise chain", 30)], "7"))];
        let mut plain = BTreeMap::new();
        plain.insert("t1".to_string(), vec![plain_sample("t1", 30, true)]);
        let bundle = assemble(&outcomes, &plain, &template);
        assert_eq!(bundle.report.preference_pairs, 1);
        assert_eq!(bundle.report.length_inversions, 1);
    }

    #[test]
    fn record_json_shapes_are_stable() {
        let record = SftRecord {
            id: "t1".into(),
            question: "Q".into(),
            target: "T".into(),
            answer: "7".into(),
            tokens: 4,
        };
        assert_eq!(
            serde_json::to_string(&record).unwrap(),
            r#"{"id":"t1","question":"Q","target":"T","answer":"7","tokens":4}"#
        );
        let pair = PreferenceRecord {
            id: "t1".into(),
            prompt: "P".into(),
            chosen: "C".into(),
            rejected: "R".into(),
            chosen_tokens: 1,
            rejected_tokens: 2,
        };
        assert_eq!(
            serde_json::to_string(&pair).unwrap(),
            r#"{"id":"t1","prompt":"P","chosen":"C","rejected":"R","chosen_tokens":1,"rejected_tokens":2}"#
        );
    }
}
