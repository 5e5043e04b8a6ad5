//! Quantitative measures: accuracy, token counts, compression rate,
//! reflection-structure statistics, and the early-stopping threshold
//! sweep.

use crate::answer::verify_answer;
use crate::chain::ReasoningChain;
use crate::reflect::JudgeAnnotation;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use thiserror::Error;

/// Metric computation errors.
#[derive(Debug, Error)]
pub enum MetricsError {
    /// An annotation index points outside the chain.
    #[error("annotation index {index} outside chain of {len} steps")]
    IndexOutOfRange {
        /// Offending 1-based index.
        index: usize,
        /// Number of steps in the chain.
        len: usize,
    },
    /// The aggregate needs at least one element.
    #[error("empty input")]
    EmptyInput,
    /// Compression needs a positive baseline token count.
    #[error("baseline mean tokens must be positive, got {0}")]
    ZeroBaseline(f64),
    /// A probe trace was empty or had a zero answer index.
    #[error("invalid sweep trace: {0}")]
    InvalidTrace(String),
    /// Corpus and baseline share no task ids.
    #[error("corpus and baseline share no task ids")]
    BaselineMismatch,
    /// Report files could not be written.
    #[error("report io failure: {0}")]
    Io(#[from] std::io::Error),
    /// CSV encoding failed.
    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
}

/// Token and reflection-structure statistics for one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    /// Sum of per-step token counts.
    pub tokens: usize,
    /// Number of steps.
    pub step_num: usize,
    /// Mean tokens per step (0 for an empty chain).
    pub step_len: f64,
    /// Steps whose index appears in a reflection group.
    pub ref_num: usize,
    /// Steps in no reflection group.
    pub non_ref_num: usize,
    /// Reflection steps strictly before the first-answer step.
    pub pre_fas_ref_num: usize,
    /// Reflection steps at or after the first-answer step.
    pub post_fas_ref_num: usize,
}

/// Computes [`ChainStats`] from a chain and its annotation. A step is a
/// reflection step iff its index appears in any annotation group; the
/// pre/post split is at `fas_index`, with a reflection at the answer step
/// itself counting post.
pub fn chain_stats(
    chain: &ReasoningChain,
    annotation: &JudgeAnnotation,
) -> Result<ChainStats, MetricsError> {
    let len = chain.steps.len();
    let check = |index: usize| {
        if index == 0 || index > len {
            Err(MetricsError::IndexOutOfRange { index, len })
        } else {
            Ok(())
        }
    };
    check(annotation.fas_index)?;
    let mut reflective = HashSet::new();
    for group in &annotation.reflection_groups {
        for &index in group {
            check(index)?;
            reflective.insert(index);
        }
    }

    let tokens = chain.total_step_tokens();
    let step_num = len;
    let ref_num = reflective.len();
    let pre_fas_ref_num = reflective
        .iter()
        .filter(|&&i| i < annotation.fas_index)
        .count();
    Ok(ChainStats {
        tokens,
        step_num,
        step_len: if step_num == 0 {
            0.0
        } else {
            tokens as f64 / step_num as f64
        },
        ref_num,
        non_ref_num: step_num - ref_num,
        pre_fas_ref_num,
        post_fas_ref_num: ref_num - pre_fas_ref_num,
    })
}

/// Fraction of (predicted, reference) pairs that verify.
pub fn accuracy(results: &[(String, String)]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = results
        .iter()
        .filter(|(predicted, reference)| verify_answer(predicted, reference))
        .count();
    Ok(correct as f64 / results.len() as f64)
}

/// Ratio of mean response length to the baseline's.
pub fn compression_rate(mean_tokens: f64, baseline_mean_tokens: f64) -> Result<f64, MetricsError> {
    if baseline_mean_tokens <= 0.0 {
        return Err(MetricsError::ZeroBaseline(baseline_mean_tokens));
    }
    Ok(mean_tokens / baseline_mean_tokens)
}

/// One per-step confidence trace with its first-answer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrace {
    /// Confidence value probed after each step, in step order.
    pub probes: Vec<f64>,
    /// 1-based first-answer step.
    pub fas: usize,
}

/// Where first-exceed indices land relative to the first-answer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SweepBuckets {
    /// Stops strictly before the answer step.
    pub pre_fas: usize,
    /// Stops exactly at the answer step.
    pub fas: usize,
    /// Stops at the k-th step after the answer step, k = 1..=5.
    pub refs: [usize; 5],
    /// Stops more than five steps past the answer step, or traces that
    /// never exceed the threshold.
    pub beyond: usize,
}

impl SweepBuckets {
    /// Total count across all buckets.
    pub fn total(&self) -> usize {
        self.pre_fas + self.fas + self.refs.iter().sum::<usize>() + self.beyond
    }
}

/// One threshold's histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// The threshold swept.
    pub threshold: f64,
    /// Stop-location histogram at that threshold.
    pub buckets: SweepBuckets,
}

/// 1-based index of the first probe strictly above `threshold`.
pub fn first_crossing(probes: &[f64], threshold: f64) -> Option<usize> {
    probes.iter().position(|&p| p > threshold).map(|i| i + 1)
}

fn bucket(stop: Option<usize>, fas: usize, buckets: &mut SweepBuckets) {
    match stop {
        None => buckets.beyond += 1,
        Some(s) if s < fas => buckets.pre_fas += 1,
        Some(s) if s == fas => buckets.fas += 1,
        Some(s) => {
            let offset = s - fas;
            if offset <= 5 {
                buckets.refs[offset - 1] += 1;
            } else {
                buckets.beyond += 1;
            }
        }
    }
}

/// For each threshold, histograms where each trace's first-exceed index
/// lands relative to its first-answer step. Every trace lands in exactly
/// one bucket, so each histogram totals the trace count.
pub fn threshold_sweep(
    traces: &[SweepTrace],
    thresholds: &[f64],
) -> Result<Vec<SweepRow>, MetricsError> {
    for (i, trace) in traces.iter().enumerate() {
        if trace.probes.is_empty() {
            return Err(MetricsError::InvalidTrace(format!("trace {i} has no probes")));
        }
        if trace.fas == 0 {
            return Err(MetricsError::InvalidTrace(format!(
                "trace {i} has a zero answer index"
            )));
        }
    }
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let mut buckets = SweepBuckets::default();
            for trace in traces {
                bucket(first_crossing(&trace.probes, threshold), trace.fas, &mut buckets);
            }
            SweepRow { threshold, buckets }
        })
        .collect())
}

/// One task's measurements, ready for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeasure {
    /// Task id.
    pub id: String,
    /// Benchmark group (task `meta["benchmark"]`, defaulting to "all").
    pub benchmark: String,
    /// Whether the final answer verified against the ground truth.
    pub correct: bool,
    /// Per-chain statistics.
    #[serde(flatten)]
    pub stats: ChainStats,
}

impl TaskMeasure {
    /// Measures one annotated chain. Correctness is false when either the
    /// final answer or the ground truth is missing.
    pub fn from_chain(
        chain: &ReasoningChain,
        annotation: &JudgeAnnotation,
    ) -> Result<Self, MetricsError> {
        let stats = chain_stats(chain, annotation)?;
        let correct = match (&chain.final_answer, &chain.task.ground_truth) {
            (Some(predicted), Some(reference)) => verify_answer(predicted, reference),
            _ => false,
        };
        Ok(TaskMeasure {
            id: chain.task.id.clone(),
            benchmark: chain
                .task
                .meta
                .get("benchmark")
                .cloned()
                .unwrap_or_else(|| "all".to_string()),
            correct,
            stats,
        })
    }
}

/// Aggregates for one benchmark group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Benchmark name.
    pub benchmark: String,
    /// Tasks in the group.
    pub n: usize,
    /// Fraction correct.
    pub accuracy: f64,
    /// Mean step tokens.
    pub mean_tokens: f64,
    /// Mean step count.
    pub mean_step_num: f64,
    /// Mean tokens per step.
    pub mean_step_len: f64,
    /// Mean reflection-step count.
    pub mean_ref_num: f64,
    /// Tasks matched against the baseline by id.
    pub matched: usize,
    /// Mean tokens over matched tasks divided by the baseline's mean over
    /// the same ids; absent when nothing matched.
    pub compression_rate: Option<f64>,
}

/// Corpus-level report: per-group aggregates plus unweighted means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Per-benchmark aggregates, sorted by benchmark name.
    pub groups: Vec<GroupReport>,
    /// Unweighted mean of group accuracies.
    pub average_accuracy: f64,
    /// Unweighted mean of group mean-token counts.
    pub average_tokens: f64,
    /// Unweighted mean of group compression rates, over groups that have
    /// one.
    pub average_compression_rate: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Aggregates task measures into a [`BenchmarkReport`]. The baseline is
/// matched per task id; it must share at least one id with the corpus.
/// With an empty baseline slice, compression is skipped entirely.
pub fn report(rows: &[TaskMeasure], baseline: &[TaskMeasure]) -> Result<BenchmarkReport, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let baseline_tokens: BTreeMap<&str, usize> = baseline
        .iter()
        .map(|row| (row.id.as_str(), row.stats.tokens))
        .collect();
    if !baseline.is_empty() && !rows.iter().any(|r| baseline_tokens.contains_key(r.id.as_str())) {
        return Err(MetricsError::BaselineMismatch);
    }

    let mut by_group: BTreeMap<&str, Vec<&TaskMeasure>> = BTreeMap::new();
    for row in rows {
        by_group.entry(row.benchmark.as_str()).or_default().push(row);
    }

    let mut groups = Vec::new();
    for (benchmark, members) in by_group {
        let n = members.len();
        let accuracy = members.iter().filter(|m| m.correct).count() as f64 / n as f64;
        let matched: Vec<_> = members
            .iter()
            .filter(|m| baseline_tokens.contains_key(m.id.as_str()))
            .collect();
        let compression = if matched.is_empty() {
            None
        } else {
            let mean_tokens = mean(matched.iter().map(|m| m.stats.tokens as f64));
            let baseline_mean = mean(
                matched
                    .iter()
                    .map(|m| baseline_tokens[m.id.as_str()] as f64),
            );
            Some(compression_rate(mean_tokens, baseline_mean)?)
        };
        groups.push(GroupReport {
            benchmark: benchmark.to_string(),
            n,
            accuracy,
            mean_tokens: mean(members.iter().map(|m| m.stats.tokens as f64)),
            mean_step_num: mean(members.iter().map(|m| m.stats.step_num as f64)),
            mean_step_len: mean(members.iter().map(|m| m.stats.step_len)),
            mean_ref_num: mean(members.iter().map(|m| m.stats.ref_num as f64)),
            matched: matched.len(),
            compression_rate: compression,
        });
    }

    let average_accuracy = mean(groups.iter().map(|g| g.accuracy));
    let average_tokens = mean(groups.iter().map(|g| g.mean_tokens));
    let with_cr: Vec<f64> = groups.iter().filter_map(|g| g.compression_rate).collect();
    let average_compression_rate = if with_cr.is_empty() {
        None
    } else {
        Some(with_cr.iter().sum::<f64>() / with_cr.len() as f64)
    };
    Ok(BenchmarkReport {
        groups,
        average_accuracy,
        average_tokens,
        average_compression_rate,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    acc: u8,
    tokens: usize,
    step_num: usize,
    step_len: f64,
    ref_num: usize,
    pre_fas_ref: usize,
    post_fas_ref: usize,
}

/// Writes per-task rows as CSV with the fixed column set
/// `id,acc,tokens,step_num,step_len,ref_num,pre_fas_ref,post_fas_ref`.
pub fn write_measures_csv(path: &Path, rows: &[TaskMeasure]) -> Result<(), MetricsError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(CsvRow {
            id: &row.id,
            acc: u8::from(row.correct),
            tokens: row.stats.tokens,
            step_num: row.stats.step_num,
            step_len: row.stats.step_len,
            ref_num: row.stats.ref_num,
            pre_fas_ref: row.stats.pre_fas_ref_num,
            post_fas_ref: row.stats.post_fas_ref_num,
        })?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ReasoningChain, Step, StepKind, Task, Termination};

    fn chain_with_steps(texts: &[&str]) -> ReasoningChain {
        let task = Task::new("m1", "Q", Some("7".into())).unwrap();
        let mut chain = ReasoningChain::new(task);
        for (i, text) in texts.iter().enumerate() {
            chain = chain
                .append_step(Step {
                    index: i + 1,
                    text: text.to_string(),
                    kind: StepKind::Plain,
                    injected_phrase: None,
                    token_count: text.split_whitespace().count(),
                })
                .unwrap();
        }
        chain.terminated = Termination::NaturalEnd;
        chain
    }

    #[test]
    fn stats_on_two_step_chain_with_no_groups() {
        let chain = chain_with_steps(&["ab cd", "ef"]);
        let annotation = JudgeAnnotation::new(vec![], 2).unwrap();
        let stats = chain_stats(&chain, &annotation).unwrap();
        assert_eq!(stats.tokens, 3);
        assert_eq!(stats.step_num, 2);
        assert!((stats.step_len - 1.5).abs() < 1e-12);
        assert_eq!(stats.ref_num, 0);
        assert_eq!(stats.non_ref_num, 2);
        assert_eq!(stats.pre_fas_ref_num, 0);
        assert_eq!(stats.post_fas_ref_num, 0);
    }

    #[test]
    fn stats_split_reflections_around_answer_step() {
        let chain = chain_with_steps(&["s1", "s2", "s3", "s4", "s5", "s6", "s7", "s8"]);
        let annotation = JudgeAnnotation::new(vec![vec![4], vec![7]], 6).unwrap();
        let stats = chain_stats(&chain, &annotation).unwrap();
        assert_eq!(stats.ref_num, 2);
        assert_eq!(stats.non_ref_num, 6);
        assert_eq!(stats.pre_fas_ref_num, 1);
        assert_eq!(stats.post_fas_ref_num, 1);
    }

    #[test]
    fn stats_reject_out_of_range_indices() {
        let chain = chain_with_steps(&["s1", "s2"]);
        let annotation = JudgeAnnotation::new(vec![vec![3]], 2).unwrap();
        assert!(matches!(
            chain_stats(&chain, &annotation),
            Err(MetricsError::IndexOutOfRange { index: 3, len: 2 })
        ));
        let annotation = JudgeAnnotation::new(vec![], 5).unwrap();
        assert!(matches!(
            chain_stats(&chain, &annotation),
            Err(MetricsError::IndexOutOfRange { index: 5, len: 2 })
        ));
    }

    #[test]
    fn accuracy_counts_verified_pairs() {
        let results = vec![
            ("\\boxed{7}".to_string(), "7".to_string()),
            ("The answer is 9".to_string(), "7".to_string()),
            ("0.5".to_string(), "1/2".to_string()),
            ("8".to_string(), "7".to_string()),
        ];
        assert!((accuracy(&results).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(accuracy(&[]), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn compression_matches_reported_table_rows() {
        assert!((compression_rate(2244.0, 3854.0).unwrap() * 100.0 - 58.0).abs() <= 1.0);
        assert!((compression_rate(832.0, 1442.0).unwrap() * 100.0 - 58.0).abs() <= 1.0);
        assert!((compression_rate(1946.0, 3854.0).unwrap() * 100.0 - 51.0).abs() <= 1.0);
        assert_eq!(compression_rate(5.0, 5.0).unwrap(), 1.0);
        assert!(matches!(
            compression_rate(10.0, 0.0),
            Err(MetricsError::ZeroBaseline(_))
        ));
    }

    #[test]
    fn first_crossing_is_strict_and_one_based() {
        let probes = [0.3, 0.5, 0.9];
        assert_eq!(first_crossing(&probes, 0.5), Some(3));
        assert_eq!(first_crossing(&probes, 0.2), Some(1));
        assert_eq!(first_crossing(&probes, 0.9), None);
    }

    #[test]
    fn sweep_buckets_relative_to_answer_step() {
        let trace = SweepTrace {
            probes: vec![0.3, 0.6, 0.9],
            fas: 2,
        };
        let rows = threshold_sweep(std::slice::from_ref(&trace), &[0.0, 0.5, 0.8, 0.95]).unwrap();
        // t=0.0: first index 1 < fas → pre.
        assert_eq!(rows[0].buckets.pre_fas, 1);
        // t=0.5: index 2 == fas.
        assert_eq!(rows[1].buckets.fas, 1);
        // t=0.8: index 3 == fas+1 → first post-answer bucket.
        assert_eq!(rows[2].buckets.refs[0], 1);
        // t=0.95: never exceeds → beyond.
        assert_eq!(rows[3].buckets.beyond, 1);
        for row in &rows {
            assert_eq!(row.buckets.total(), 1);
        }
    }

    #[test]
    fn sweep_rejects_invalid_traces() {
        let empty = SweepTrace { probes: vec![], fas: 1 };
        assert!(matches!(
            threshold_sweep(&[empty], &[0.5]),
            Err(MetricsError::InvalidTrace(_))
        ));
        let zero_fas = SweepTrace { probes: vec![0.5], fas: 0 };
        assert!(matches!(
            threshold_sweep(&[zero_fas], &[0.5]),
            Err(MetricsError::InvalidTrace(_))
        ));
    }

    #[test]
    fn sweep_conserves_counts_and_far_stops_go_beyond() {
        let traces = vec![
            SweepTrace { probes: vec![0.9; 10], fas: 1 },
            SweepTrace { probes: vec![0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.9], fas: 1 },
            SweepTrace { probes: vec![0.45, 0.55, 0.65], fas: 2 },
        ];
        let rows = threshold_sweep(&traces, &[0.4, 0.5, 0.6, 0.7]).unwrap();
        for row in &rows {
            assert_eq!(row.buckets.total(), traces.len());
        }
        // Trace 2 stops at index 8 = fas+7 → beyond for every threshold.
        assert!(rows.iter().all(|r| r.buckets.beyond >= 1));
    }

    fn measure(id: &str, benchmark: &str, correct: bool, tokens: usize) -> TaskMeasure {
        TaskMeasure {
            id: id.into(),
            benchmark: benchmark.into(),
            correct,
            stats: ChainStats {
                tokens,
                step_num: 2,
                step_len: tokens as f64 / 2.0,
                ref_num: 1,
                non_ref_num: 1,
                pre_fas_ref_num: 1,
                post_fas_ref_num: 0,
            },
        }
    }

    #[test]
    fn report_groups_and_averages_are_unweighted() {
        let rows = vec![
            measure("a1", "math", true, 100),
            measure("a2", "math", false, 300),
            measure("b1", "gsm", true, 50),
        ];
        let baseline = vec![
            measure("a1", "math", true, 400),
            measure("a2", "math", true, 400),
            measure("b1", "gsm", true, 100),
        ];
        let report = report(&rows, &baseline).unwrap();
        assert_eq!(report.groups.len(), 2);
        let gsm = &report.groups[0];
        assert_eq!(gsm.benchmark, "gsm");
        assert_eq!(gsm.n, 1);
        assert_eq!(gsm.accuracy, 1.0);
        assert_eq!(gsm.compression_rate, Some(0.5));
        let math = &report.groups[1];
        assert_eq!(math.benchmark, "math");
        assert_eq!(math.accuracy, 0.5);
        assert_eq!(math.compression_rate, Some(0.5));
        // Unweighted across groups despite group sizes 1 and 2.
        assert!((report.average_accuracy - 0.75).abs() < 1e-12);
        assert!((report.average_tokens - (200.0 + 50.0) / 2.0).abs() < 1e-12);
        assert_eq!(report.average_compression_rate, Some(0.5));
    }

    #[test]
    fn report_with_self_baseline_is_unity() {
        let rows = vec![measure("a1", "all", true, 120), measure("a2", "all", true, 60)];
        let report = report(&rows, &rows).unwrap();
        assert_eq!(report.groups[0].compression_rate, Some(1.0));
        assert_eq!(report.groups[0].matched, 2);
    }

    #[test]
    fn report_rejects_disjoint_baseline() {
        let rows = vec![measure("a1", "all", true, 120)];
        let baseline = vec![measure("zz", "all", true, 120)];
        assert!(matches!(
            report(&rows, &baseline),
            Err(MetricsError::BaselineMismatch)
        ));
        // No baseline at all: compression simply absent.
        let report = report(&rows, &[]).unwrap();
        assert_eq!(report.groups[0].compression_rate, None);
        assert_eq!(report.average_compression_rate, None);
    }

    #[test]
    fn csv_rows_use_the_fixed_column_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports/stats.csv");
        let rows = vec![measure("a1", "math", true, 100)];
        write_measures_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "id,acc,tokens,step_num,step_len,ref_num,pre_fas_ref,post_fas_ref"
        );
        assert_eq!(lines.next().unwrap(), "a1,1,100,2,50.0,1,1,0");
    }
}
