//! Deterministic scripted backend used throughout the test suites.
//!
//! A script is a JSON object mapping prompt keys to entries. Keys are
//! normalized by trimming trailing whitespace, so a prompt that ends with
//! the step delimiter keys identically to one that does not. Lookups are
//! exact; a prompt with no entry is a hard [`BackendError::ScriptMiss`].

use super::{
    Backend, BackendError, CompletionRequest, CompletionResult, FinishReason, TokenDistribution,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// One scripted response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    /// A fixed continuation.
    Completion { text: String },
    /// Seed-indexed continuation variants: request seed `s` (default 0)
    /// selects `texts[s % len]`, statelessly.
    Sampled { texts: Vec<String> },
    /// A next-token probability table for probe prompts.
    Distribution { dist: Vec<(String, f64)> },
}

/// In-memory scripted backend.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    entries: HashMap<String, ScriptEntry>,
}

fn key(prompt: &str) -> &str {
    prompt.trim_end()
}

/// Word-granularity token oracle used by the mock: whitespace-separated words.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Truncates `text` to its first `max_words` words, preserving original
/// spacing; returns `None` when no truncation is needed.
fn truncate_words(text: &str, max_words: usize) -> Option<&str> {
    let mut words = 0usize;
    let mut in_word = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            words += 1;
            if words > max_words {
                return Some(text[..i].trim_end());
            }
        }
    }
    None
}

impl ScriptedBackend {
    /// An empty script.
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a script from its JSON object form.
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let raw: HashMap<String, ScriptEntry> = serde_json::from_str(json)?;
        let mut backend = Self::new();
        for (prompt, entry) in raw {
            backend.entries.insert(key(&prompt).to_string(), entry);
        }
        Ok(backend)
    }

    /// Loads a script file.
    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Unavailable(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&json)
            .map_err(|e| BackendError::Unavailable(format!("parsing {}: {e}", path.display())))
    }

    /// Serializes the script back to JSON (entries in sorted-key order).
    pub fn to_json(&self) -> String {
        let sorted: std::collections::BTreeMap<_, _> = self.entries.iter().collect();
        serde_json::to_string_pretty(&sorted).expect("script entries serialize")
    }

    /// Scripts a fixed continuation for `prompt`.
    pub fn script_completion(&mut self, prompt: &str, text: &str) {
        self.entries
            .insert(key(prompt).to_string(), ScriptEntry::Completion { text: text.into() });
    }

    /// Scripts seed-indexed continuation variants for `prompt`.
    pub fn script_samples(&mut self, prompt: &str, texts: Vec<String>) {
        self.entries
            .insert(key(prompt).to_string(), ScriptEntry::Sampled { texts });
    }

    /// Scripts a next-token distribution for `prompt`.
    pub fn script_distribution(&mut self, prompt: &str, dist: Vec<(String, f64)>) {
        self.entries
            .insert(key(prompt).to_string(), ScriptEntry::Distribution { dist });
    }

    /// Number of scripted entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Whether the script is empty.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, prompt: &str) -> Result<&ScriptEntry, BackendError> {
        self.entries.get(key(prompt)).ok_or_else(|| {
            let shown: String = prompt.chars().rev().take(160).collect::<Vec<_>>().iter().rev().collect();
            BackendError::ScriptMiss(format!("no entry for prompt ending …{shown:?}"))
        })
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let scripted = match self.lookup(&request.prompt)? {
            ScriptEntry::Completion { text } => text.clone(),
            ScriptEntry::Sampled { texts } => {
                if texts.is_empty() {
                    return Err(BackendError::ScriptMiss("sampled entry with no texts".into()));
                }
                let idx = request.seed.unwrap_or(0) as usize % texts.len();
                texts[idx].clone()
            }
            ScriptEntry::Distribution { .. } => {
                return Err(BackendError::ScriptMiss(
                    "generate called on a distribution entry".into(),
                ));
            }
        };

        // Earliest stop-sequence match wins; the match itself is excluded.
        let mut cut: Option<usize> = None;
        for stop in &request.stop {
            if let Some(pos) = scripted.find(stop.as_str()) {
                cut = Some(cut.map_or(pos, |c| c.min(pos)));
            }
        }
        if let Some(pos) = cut {
            let text = scripted[..pos].to_string();
            let token_count = word_count(&text);
            return Ok(CompletionResult {
                text,
                finish_reason: FinishReason::Stop,
                token_count,
            });
        }

        if let Some(prefix) = truncate_words(&scripted, request.max_tokens) {
            return Ok(CompletionResult {
                text: prefix.to_string(),
                finish_reason: FinishReason::Length,
                token_count: request.max_tokens,
            });
        }

        let token_count = word_count(&scripted);
        Ok(CompletionResult {
            text: scripted,
            finish_reason: FinishReason::Eos,
            token_count,
        })
    }

    fn next_token_distribution(
        &self,
        prompt: &str,
        top_k: usize,
    ) -> Result<TokenDistribution, BackendError> {
        match self.lookup(prompt)? {
            ScriptEntry::Distribution { dist } => TokenDistribution::new(dist.clone(), top_k),
            _ => Err(BackendError::ScriptMiss(
                "probe hit a completion entry, not a distribution".into(),
            )),
        }
    }

    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        Ok(word_count(text))
    }
}
