//! Text-completion backend abstraction: requests, results, probe
//! distributions, and the error taxonomy shared by all implementations.

mod script;
pub use script::{word_count, ScriptEntry, ScriptedBackend};

#[cfg(feature = "http")]
mod http;
#[cfg(feature = "http")]
pub use http::{HttpBackend, HttpBackendConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Backend failures.
#[derive(Debug, Error)]
pub enum BackendError {
    /// Transport-level failure that survived the retry budget.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// The backend rejected the request (4xx class); never retried.
    #[error("backend rejected request: {0}")]
    Rejected(String),
    /// A per-call or cumulative token budget would be exceeded.
    #[error("token budget exceeded: used {used} of {budget}")]
    BudgetExceeded { used: usize, budget: usize },
    /// The backend cannot expose next-token probabilities.
    #[error("backend does not support token-probability probes")]
    ProbeUnsupported,
    /// The scripted mock has no entry for a prompt — a misconfigured test.
    #[error("script miss: {0}")]
    ScriptMiss(String),
    /// The request violates a field invariant.
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    /// A probability table violates its invariants.
    #[error("invalid token distribution: {0}")]
    InvalidDistribution(String),
}

/// Why a completion ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// A stop sequence matched.
    Stop,
    /// The token cap was reached.
    Length,
    /// The model emitted end-of-sequence.
    Eos,
}

/// Sampling parameters shared by generation calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    /// Per-call completion token cap.
    pub max_tokens: usize,
    /// Sampling temperature.
    pub temperature: f64,
    /// Nucleus sampling mass.
    pub top_p: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_tokens: 512,
            temperature: 0.6,
            top_p: 0.95,
        }
    }
}

/// One completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    /// Full prompt text.
    pub prompt: String,
    /// Completion token cap (≥ 1).
    pub max_tokens: usize,
    /// Sampling temperature (≥ 0).
    pub temperature: f64,
    /// Nucleus mass in (0, 1].
    pub top_p: f64,
    /// Stop sequences; generation halts before the earliest match.
    pub stop: Vec<String>,
    /// Sampling seed, when the backend honors one.
    pub seed: Option<u64>,
}

impl CompletionRequest {
    /// Builds a request from shared sampling params.
    pub fn new(prompt: String, stop: Vec<String>, params: &GenerationParams) -> Self {
        CompletionRequest {
            prompt,
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            top_p: params.top_p,
            stop,
            seed: None,
        }
    }

    /// Checks the field invariants.
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be ≥ 1".into()));
        }
        // NaN rejected alongside negatives.
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be ≥ 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "top_p {} must be in (0, 1]",
                self.top_p
            )));
        }
        if self.stop.iter().any(|s| s.is_empty()) {
            return Err(BackendError::InvalidRequest("empty stop sequence".into()));
        }
        Ok(())
    }
}

/// A finished completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    /// Generated text, stop sequence excluded.
    pub text: String,
    /// Why generation ended.
    pub finish_reason: FinishReason,
    /// Backend-reported completion token count.
    pub token_count: usize,
}

/// Top-k next-token probability table, sorted by descending probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    /// `(token, probability)` rows; token surfaces are preserved verbatim.
    pub entries: Vec<(String, f64)>,
    /// The k the table was truncated to.
    pub top_k: usize,
}

impl TokenDistribution {
    /// Validates, sorts (descending probability, ties keep input order),
    /// and truncates `entries` to `top_k`.
    pub fn new(mut entries: Vec<(String, f64)>, top_k: usize) -> Result<Self, BackendError> {
        if top_k == 0 {
            return Err(BackendError::InvalidDistribution("top_k must be ≥ 1".into()));
        }
        let mut total = 0.0;
        for (token, p) in &entries {
            if !(*p >= 0.0 && *p <= 1.0) {
                return Err(BackendError::InvalidDistribution(format!(
                    "probability {p} for token {token:?} is outside [0, 1]"
                )));
            }
            total += p;
        }
        if total > 1.0 + 1e-6 {
            return Err(BackendError::InvalidDistribution(format!(
                "probabilities sum to {total}, more than 1"
            )));
        }
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("probabilities are finite"));
        entries.truncate(top_k);
        Ok(TokenDistribution { entries, top_k })
    }

    /// Total probability mass retained in the table.
    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }
}

/// A text-completion engine.
///
/// Implementations must be deterministic for the scripted mock and, where
/// the engine supports seeding, for a fixed seed.
pub trait Backend: Send + Sync {
    /// Runs one completion.
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;

    /// Returns the top-k next-token distribution at the end of `prompt`.
    fn next_token_distribution(
        &self,
        prompt: &str,
        top_k: usize,
    ) -> Result<TokenDistribution, BackendError>;

    /// Counts `text` in the backend's own tokenization.
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let params = GenerationParams::default();
        let mut req = CompletionRequest::new("p".into(), vec![], &params);
        assert!(req.validate().is_ok());
        req.max_tokens = 0;
        assert!(matches!(req.validate(), Err(BackendError::InvalidRequest(_))));
        req.max_tokens = 1;
        req.top_p = 0.0;
        assert!(req.validate().is_err());
        req.top_p = 1.0;
        req.stop = vec!["".into()];
        assert!(req.validate().is_err());
    }

    #[test]
    fn distribution_sorts_and_truncates() {
        let dist = TokenDistribution::new(
            vec![("a".into(), 0.1), ("b".into(), 0.5), ("c".into(), 0.3)],
            2,
        )
        .unwrap();
        assert_eq!(dist.entries.len(), 2);
        assert_eq!(dist.entries[0], ("b".into(), 0.5));
        assert_eq!(dist.entries[1], ("c".into(), 0.3));
    }

    #[test]
    fn distribution_keeps_tied_input_order() {
        let dist = TokenDistribution::new(
            vec![("x".into(), 0.2), ("y".into(), 0.2), ("z".into(), 0.2)],
            3,
        )
        .unwrap();
        let tokens: Vec<&str> = dist.entries.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(tokens, ["x", "y", "z"]);
    }

    #[test]
    fn distribution_rejects_bad_mass() {
        assert!(TokenDistribution::new(vec![("a".into(), 1.2)], 1).is_err());
        assert!(TokenDistribution::new(vec![("a".into(), -0.1)], 1).is_err());
        assert!(
            TokenDistribution::new(vec![("a".into(), 0.7), ("b".into(), 0.7)], 2).is_err()
        );
        assert!(TokenDistribution::new(vec![("a".into(), 0.5)], 0).is_err());
    }
}
