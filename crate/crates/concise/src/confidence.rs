//! Step-level confidence probing and the injected-phrase pool.
//!
//! After each step a short probing prompt is appended to the chain and the
//! backend's next-token distribution is read. The confidence score sums
//! the probability of indicative words, plus — when mass sits on the
//! composite prefix ("pretty") — a second probe's indicative mass weighted
//! by that prefix probability:
//!
//! `ĉ = p(confident) + p(sure) + p(pretty) · (p₂(confident) + p₂(sure))`

use crate::backend::{Backend, BackendError, CompletionRequest, GenerationParams, TokenDistribution};
use crate::chain::{PromptTemplate, ReasoningChain};
use crate::reflect::{is_reflection_start, KeywordSet};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Confidence-module errors.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfidenceError {
    /// A phrase pool must hold at least one phrase.
    #[error("phrase pool is empty")]
    EmptyPool,
    /// Pool phrases must be unique.
    #[error("duplicate phrase in pool: {0:?}")]
    DuplicatePhrase(String),
}

/// Configuration of the confidence detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Text appended (after a step delimiter) to elicit a confidence token.
    pub probing_prompt: String,
    /// Words whose next-token probability counts as confidence.
    pub indicative_words: Vec<String>,
    /// Prefix ("pretty") whose mass triggers and weights a second probe.
    pub composite_prefix: String,
    /// Early-stop threshold t_e; stopping requires `ĉ > t_e`, strictly.
    #[serde(rename = "t_e", alias = "threshold")]
    pub threshold: f64,
    /// Number of top tokens requested per probe.
    pub top_k: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            probing_prompt: "So, I'm".into(),
            indicative_words: vec!["confident".into(), "sure".into()],
            composite_prefix: "pretty".into(),
            threshold: 0.5,
            top_k: 20,
        }
    }
}

/// One confidence measurement, with enough detail to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReading {
    /// The score ĉ.
    pub value: f64,
    /// First-probe probability per indicative word (summed over token
    /// surface variants such as `" confident"` / `"confident"`).
    pub components: BTreeMap<String, f64>,
    /// First-probe mass on the composite prefix.
    pub composite_mass: f64,
    /// Whether the composite second probe was issued.
    pub second_query_used: bool,
    /// Second-probe probability per indicative word (empty when unused).
    pub second_components: BTreeMap<String, f64>,
    /// Total retained mass of the first probe (truncation diagnostic).
    pub top_k_mass: f64,
    /// Total retained mass of the second probe, when issued.
    pub second_top_k_mass: Option<f64>,
    /// The probe prompt, kept as a transcript.
    pub probe_prompt: String,
}

/// Token normalization applied before matching: surrounding whitespace
/// stripped, lowercased.
fn normalize_token(token: &str) -> String {
    token.trim().to_lowercase()
}

struct Tally {
    components: BTreeMap<String, f64>,
    composite_mass: f64,
    total_mass: f64,
}

fn tally(dist: &TokenDistribution, config: &DetectorConfig) -> Tally {
    let mut components: BTreeMap<String, f64> = config
        .indicative_words
        .iter()
        .map(|w| (normalize_token(w), 0.0))
        .collect();
    let composite = normalize_token(&config.composite_prefix);
    let mut composite_mass = 0.0;
    let mut total_mass = 0.0;
    for (token, p) in &dist.entries {
        total_mass += p;
        let norm = normalize_token(token);
        if let Some(slot) = components.get_mut(&norm) {
            *slot += p;
        }
        if norm == composite {
            composite_mass += p;
        }
    }
    Tally {
        components,
        composite_mass,
        total_mass,
    }
}

/// The probe prompt for `chain`: the rendered chain, a step delimiter,
/// then the probing text.
pub fn probe_prompt(
    chain: &ReasoningChain,
    template: &PromptTemplate,
    config: &DetectorConfig,
) -> String {
    format!(
        "{}{}{}",
        chain.render_prompt(template, None),
        template.step_delimiter,
        config.probing_prompt
    )
}

/// Measures the model's confidence after the last step of `chain`.
///
/// Issues exactly one distribution probe, plus a second one only when the
/// composite prefix carries non-zero mass.
pub fn detect_confidence(
    chain: &ReasoningChain,
    template: &PromptTemplate,
    config: &DetectorConfig,
    backend: &dyn Backend,
) -> Result<ConfidenceReading, BackendError> {
    let prompt = probe_prompt(chain, template, config);
    let first = backend.next_token_distribution(&prompt, config.top_k)?;
    let first_tally = tally(&first, config);
    let direct: f64 = first_tally.components.values().sum();

    let mut reading = ConfidenceReading {
        value: direct,
        components: first_tally.components,
        composite_mass: first_tally.composite_mass,
        second_query_used: false,
        second_components: BTreeMap::new(),
        top_k_mass: first_tally.total_mass,
        second_top_k_mass: None,
        probe_prompt: prompt.clone(),
    };
    if first_tally.composite_mass > 0.0 {
        let second_prompt = format!("{prompt} {}", config.composite_prefix);
        let second = backend.next_token_distribution(&second_prompt, config.top_k)?;
        let second_tally = tally(&second, config);
        let second_sum: f64 = second_tally.components.values().sum();
        reading.value = direct + first_tally.composite_mass * second_sum;
        reading.second_query_used = true;
        reading.second_components = second_tally.components;
        reading.second_top_k_mass = Some(second_tally.total_mass);
    }
    Ok(reading)
}

/// A non-empty pool of unique confidence phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PhrasePool {
    phrases: Vec<String>,
}

/// Default injected-phrase pool.
pub const DEFAULT_PHRASES: [&str; 20] = [
    "Therefore",
    "The reasoning holds",
    "Previous steps are correct",
    "All steps are valid",
    "With this established",
    "That sounds reasonable",
    "Let's go ahead",
    "Alright, let's carry on",
    "Let's proceed",
    "Let's progress",
    "So, putting it all together",
    "The logic stands firm",
    "The reasoning process is valid",
    "Good, let's keep going",
    "Everything seems reasonable so far",
    "This part checks out",
    "I think that's solid. So",
    "The reasoning holds, let's keep going",
    "Everything checks out, let's move on",
    "All steps are solid, let's move forward",
];

impl PhrasePool {
    /// Builds a pool, rejecting empty or duplicate-bearing input.
    pub fn new<I, S>(phrases: I) -> Result<Self, ConfidenceError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let phrases: Vec<String> = phrases.into_iter().map(Into::into).collect();
        if phrases.is_empty() {
            return Err(ConfidenceError::EmptyPool);
        }
        let mut seen = std::collections::HashSet::new();
        for phrase in &phrases {
            if !seen.insert(phrase.as_str()) {
                return Err(ConfidenceError::DuplicatePhrase(phrase.clone()));
            }
        }
        Ok(PhrasePool { phrases })
    }

    /// The phrases in pool order.
    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// Draws a phrase uniformly with `rng`.
    pub fn sample_phrase<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        let idx = rng.gen_range(0..self.phrases.len());
        &self.phrases[idx]
    }
}

impl Default for PhrasePool {
    fn default() -> Self {
        PhrasePool::new(DEFAULT_PHRASES).expect("default pool is valid")
    }
}

impl TryFrom<Vec<String>> for PhrasePool {
    type Error = ConfidenceError;
    fn try_from(phrases: Vec<String>) -> Result<Self, ConfidenceError> {
        PhrasePool::new(phrases)
    }
}

impl From<PhrasePool> for Vec<String> {
    fn from(pool: PhrasePool) -> Vec<String> {
        pool.phrases
    }
}

/// Evaluation row for one candidate phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseEvalRow {
    /// The candidate phrase.
    pub phrase: String,
    /// Fraction of evaluated points whose regenerated continuation still
    /// opened a reflection.
    pub rate: f64,
    /// Points successfully evaluated.
    pub points: usize,
    /// Points skipped because the backend failed.
    pub skipped: usize,
}

/// Scores candidate phrases by reflection-trigger rate.
///
/// For every `(candidate, point)` pair the candidate is injected after the
/// point's last step and one continuation is generated; the continuation
/// alone is keyword-classified (the phrase text itself is not scored —
/// several stock phrases contain keywords like "check"). Backend failures
/// skip the point and are tallied per candidate.
pub fn evaluate_phrase_pool(
    candidates: &[String],
    points: &[ReasoningChain],
    keywords: &KeywordSet,
    template: &PromptTemplate,
    params: &GenerationParams,
    backend: &dyn Backend,
) -> Vec<PhraseEvalRow> {
    candidates
        .iter()
        .map(|phrase| {
            let mut reflections = 0usize;
            let mut evaluated = 0usize;
            let mut skipped = 0usize;
            for point in points {
                let request = CompletionRequest::new(
                    point.render_prompt(template, Some(phrase)),
                    vec![template.step_delimiter.clone()],
                    params,
                );
                match backend.generate(&request) {
                    Ok(result) => {
                        evaluated += 1;
                        if is_reflection_start(&result.text, keywords) {
                            reflections += 1;
                        }
                    }
                    Err(_) => skipped += 1,
                }
            }
            let rate = if evaluated > 0 {
                reflections as f64 / evaluated as f64
            } else {
                0.0
            };
            PhraseEvalRow {
                phrase: phrase.clone(),
                rate,
                points: evaluated,
                skipped,
            }
        })
        .collect()
}

/// Writes phrase-evaluation rows as CSV (`phrase,rate,points,skipped`).
pub fn write_phrase_eval_csv(path: &std::path::Path, rows: &[PhraseEvalRow]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::chain::{Step, StepKind, Task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_with_step(text: &str) -> ReasoningChain {
        let task = Task::new("t", "q?", Some("5".into())).unwrap();
        ReasoningChain::new(task)
            .append_step(Step {
                index: 1,
                text: text.into(),
                kind: StepKind::Plain,
                injected_phrase: None,
                token_count: text.split_whitespace().count(),
            })
            .unwrap()
    }

    /// A backend wrapper that counts probe calls.
    struct Counting<'a> {
        inner: &'a ScriptedBackend,
        probes: std::sync::atomic::AtomicUsize,
    }

    impl Backend for Counting<'_> {
        fn generate(&self, r: &CompletionRequest) -> Result<crate::backend::CompletionResult, BackendError> {
            self.inner.generate(r)
        }
        fn next_token_distribution(&self, p: &str, k: usize) -> Result<TokenDistribution, BackendError> {
            self.probes.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            self.inner.next_token_distribution(p, k)
        }
        fn count_tokens(&self, t: &str) -> Result<usize, BackendError> {
            self.inner.count_tokens(t)
        }
    }

    #[test]
    fn composite_example_scores_exactly() {
        let chain = chain_with_step("Adding gives 5.");
        let template = PromptTemplate::default();
        let config = DetectorConfig::default();
        let prompt = probe_prompt(&chain, &template, &config);
        assert!(prompt.ends_with("Adding gives 5.\n\nSo, I'm"));

        let mut backend = ScriptedBackend::new();
        backend.script_distribution(
            &prompt,
            vec![
                (" confident".into(), 0.3),
                (" sure".into(), 0.2),
                (" pretty".into(), 0.5),
            ],
        );
        backend.script_distribution(
            &format!("{prompt} pretty"),
            vec![(" confident".into(), 0.4), (" sure".into(), 0.2)],
        );
        let counting = Counting {
            inner: &backend,
            probes: Default::default(),
        };
        let reading = detect_confidence(&chain, &template, &config, &counting).unwrap();
        assert!((reading.value - 0.8).abs() < 1e-12); // 0.3 + 0.2 + 0.5 × 0.6
        assert!(reading.second_query_used);
        assert_eq!(counting.probes.load(std::sync::atomic::Ordering::SeqCst), 2);
        assert_eq!(reading.components["confident"], 0.3);
        assert_eq!(reading.second_components["sure"], 0.2);
        assert_eq!(reading.composite_mass, 0.5);
    }

    #[test]
    fn zero_mass_scores_zero_with_one_probe() {
        let chain = chain_with_step("Adding gives 5.");
        let template = PromptTemplate::default();
        let config = DetectorConfig::default();
        let mut backend = ScriptedBackend::new();
        backend.script_distribution(
            &probe_prompt(&chain, &template, &config),
            vec![(" maybe".into(), 0.6), (" the".into(), 0.3)],
        );
        let counting = Counting {
            inner: &backend,
            probes: Default::default(),
        };
        let reading = detect_confidence(&chain, &template, &config, &counting).unwrap();
        assert_eq!(reading.value, 0.0);
        assert!(!reading.second_query_used);
        assert_eq!(counting.probes.load(std::sync::atomic::Ordering::SeqCst), 1);
    }

    #[test]
    fn full_mass_scores_one() {
        let chain = chain_with_step("Adding gives 5.");
        let template = PromptTemplate::default();
        let config = DetectorConfig::default();
        let mut backend = ScriptedBackend::new();
        backend.script_distribution(
            &probe_prompt(&chain, &template, &config),
            vec![(" confident".into(), 1.0)],
        );
        let reading = detect_confidence(&chain, &template, &config, &backend).unwrap();
        assert_eq!(reading.value, 1.0);
    }

    #[test]
    fn token_surface_variants_merge() {
        let chain = chain_with_step("Adding gives 5.");
        let template = PromptTemplate::default();
        let config = DetectorConfig::default();
        let mut backend = ScriptedBackend::new();
        backend.script_distribution(
            &probe_prompt(&chain, &template, &config),
            vec![
                (" confident".into(), 0.25),
                ("confident".into(), 0.15),
                ("Sure".into(), 0.1),
            ],
        );
        let reading = detect_confidence(&chain, &template, &config, &backend).unwrap();
        assert!((reading.value - 0.5).abs() < 1e-12);
        assert!((reading.components["confident"] - 0.4).abs() < 1e-12);
        assert!((reading.components["sure"] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn missing_second_probe_entry_is_hard_error() {
        let chain = chain_with_step("Adding gives 5.");
        let template = PromptTemplate::default();
        let config = DetectorConfig::default();
        let mut backend = ScriptedBackend::new();
        backend.script_distribution(
            &probe_prompt(&chain, &template, &config),
            vec![(" pretty".into(), 0.5)],
        );
        let err = detect_confidence(&chain, &template, &config, &backend).unwrap_err();
        assert!(matches!(err, BackendError::ScriptMiss(_)));
    }

    #[test]
    fn pool_validation() {
        assert_eq!(
            PhrasePool::new(Vec::<String>::new()).unwrap_err(),
            ConfidenceError::EmptyPool
        );
        assert_eq!(
            PhrasePool::new(["a", "a"]).unwrap_err(),
            ConfidenceError::DuplicatePhrase("a".into())
        );
        assert_eq!(PhrasePool::default().phrases().len(), 20);
    }

    #[test]
    fn sampling_single_phrase_pool_is_constant() {
        let pool = PhrasePool::new(["Let's proceed"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(pool.sample_phrase(&mut rng), "Let's proceed");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let pool = PhrasePool::default();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| pool.sample_phrase(&mut rng).to_string()).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn sampling_is_roughly_uniform() {
        // 10 000 draws over 20 phrases: expect 500 each; a 5σ band for a
        // Binomial(10 000, 1/20) is ±5·√(10 000·0.05·0.95) ≈ ±109.
        let pool = PhrasePool::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..10_000 {
            *counts.entry(pool.sample_phrase(&mut rng).to_string()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 20);
        for (phrase, count) in counts {
            assert!(
                (count as f64 - 500.0).abs() <= 109.0,
                "{phrase:?} drawn {count} times"
            );
        }
    }

    #[test]
    fn phrase_pool_evaluation_counts_reflections_and_skips() {
        let template = PromptTemplate::default();
        let keywords = KeywordSet::default();
        let params = GenerationParams::default();
        let points: Vec<ReasoningChain> = (0..10)
            .map(|i| chain_with_step(&format!("Point {i} computes a partial sum.")))
            .collect();
        let mut backend = ScriptedBackend::new();
        let candidates = vec!["Let's proceed".to_string(), "Therefore".to_string()];
        for (i, point) in points.iter().enumerate() {
            // "Let's proceed": 2 of 10 continuations reflect; one point
            // (the last) is left unscripted to exercise the skip tally.
            let prompt = point.render_prompt(&template, Some("Let's proceed"));
            if i < 9 {
                let text = if i < 2 {
                    ", but wait, that needs a second look."
                } else {
                    ", the running total is fine."
                };
                backend.script_completion(&prompt, text);
            }
            // "Therefore": never reflects.
            let prompt = point.render_prompt(&template, Some("Therefore"));
            backend.script_completion(&prompt, " the sum is settled.");
        }
        let rows = evaluate_phrase_pool(&candidates, &points, &keywords, &template, &params, &backend);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].phrase, "Let's proceed");
        assert_eq!(rows[0].points, 9);
        assert_eq!(rows[0].skipped, 1);
        assert!((rows[0].rate - 2.0 / 9.0).abs() < 1e-12);
        assert_eq!(rows[1].rate, 0.0);
        assert_eq!(rows[1].skipped, 0);
    }

    #[test]
    fn keyworded_phrases_do_not_self_flag() {
        // "This part checks out" contains "check"; only the continuation
        // must be classified.
        let template = PromptTemplate::default();
        let keywords = KeywordSet::default();
        let params = GenerationParams::default();
        let point = chain_with_step("A partial sum of 9.");
        let candidates = vec!["This part checks out".to_string()];
        let mut backend = ScriptedBackend::new();
        backend.script_completion(
            &point.render_prompt(&template, Some("This part checks out")),
            ", so the total is 9.",
        );
        let rows =
            evaluate_phrase_pool(&candidates, &[point], &keywords, &template, &params, &backend);
        assert_eq!(rows[0].rate, 0.0);
    }

    #[test]
    fn detector_config_serde_uses_t_e_key() {
        let config = DetectorConfig::default();
        let json = serde_json::to_string(&config).unwrap();
        assert!(json.contains("\"t_e\":0.5"));
        let parsed: DetectorConfig =
            serde_json::from_str(r#"{"t_e": 0.7, "top_k": 5}"#).unwrap();
        assert_eq!(parsed.threshold, 0.7);
        assert_eq!(parsed.top_k, 5);
        assert_eq!(parsed.probing_prompt, "So, I'm");
    }
}
