//! HTTP completions client for OpenAI-compatible `/v1/completions` servers
//! (vLLM, llama.cpp server, and similar engines).

use super::{
    Backend, BackendError, CompletionRequest, CompletionResult, FinishReason, TokenDistribution,
};
use serde::{Deserialize, Serialize};
use std::time::Duration;

/// Connection settings for [`HttpBackend`].
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Server root, with or without a `/v1` suffix — both
    /// `http://localhost:8000` and `http://localhost:8000/v1` work.
    pub base_url: String,
    /// Bearer token, when the server requires one.
    pub api_key: Option<String>,
    /// Model name forwarded in each request body, when the server needs it.
    pub model: Option<String>,
    /// Per-request timeout.
    pub timeout: Duration,
    /// Transport retries after the first attempt.
    pub retries: u32,
}

impl HttpBackendConfig {
    /// Sensible defaults: 60 s timeout, 3 retries.
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpBackendConfig {
            base_url: base_url.into(),
            api_key: None,
            model: None,
            timeout: Duration::from_secs(60),
            retries: 3,
        }
    }
}

/// Blocking completions client.
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct CompletionsBody<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    top_p: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct CompletionsResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<LogprobBlock>,
}

#[derive(Debug, Deserialize)]
struct LogprobBlock {
    #[serde(default)]
    top_logprobs: Vec<std::collections::HashMap<String, f64>>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

/// Maps a server-reported finish reason onto ours. Servers report `stop`
/// both for stop-sequence hits and for end-of-sequence, so the requested
/// stop list disambiguates.
fn map_finish_reason(reason: Option<&str>, had_stops: bool) -> FinishReason {
    match reason {
        Some("length") => FinishReason::Length,
        Some("stop") if had_stops => FinishReason::Stop,
        _ => FinishReason::Eos,
    }
}

/// Converts one top-logprob table (token → log probability) into
/// probability entries.
fn logprobs_to_entries(table: &std::collections::HashMap<String, f64>) -> Vec<(String, f64)> {
    table
        .iter()
        .map(|(token, lp)| (token.clone(), lp.exp().clamp(0.0, 1.0)))
        .collect()
}

impl HttpBackend {
    /// Builds a client for `config`.
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(format!("building http client: {e}")))?;
        Ok(HttpBackend { config, client })
    }

    fn endpoint(&self) -> String {
        // Accept base URLs both with and without the `/v1` suffix, since
        // OpenAI-style clients are configured either way in the wild.
        let root = self.config.base_url.trim_end_matches('/');
        let root = root.strip_suffix("/v1").unwrap_or(root);
        format!("{root}/v1/completions")
    }

    /// POSTs `body`, retrying transport and 5xx failures with capped
    /// exponential backoff. 4xx responses are rejected immediately.
    fn post(&self, body: &CompletionsBody) -> Result<CompletionsResponse, BackendError> {
        let mut last_failure = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                let backoff = Duration::from_millis((200u64 << (attempt - 1)).min(2_000));
                std::thread::sleep(backoff);
            }
            let mut request = self.client.post(self.endpoint()).json(body);
            if let Some(key) = &self.config.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_client_error() {
                        let detail = response.text().unwrap_or_default();
                        return Err(BackendError::Rejected(format!("{status}: {detail}")));
                    }
                    if !status.is_success() {
                        last_failure = format!("server error {status}");
                        continue;
                    }
                    return response.json().map_err(|e| {
                        BackendError::Unavailable(format!("decoding response: {e}"))
                    });
                }
                Err(e) => last_failure = e.to_string(),
            }
        }
        Err(BackendError::Unavailable(format!(
            "{} after {} attempts",
            last_failure,
            self.config.retries + 1
        )))
    }
}

impl Backend for HttpBackend {
    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let body = CompletionsBody {
            model: self.config.model.as_deref(),
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            top_p: request.top_p,
            stop: request.stop.iter().map(String::as_str).collect(),
            seed: request.seed,
            logprobs: None,
        };
        let response = self.post(&body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Unavailable("response has no choices".into()))?;
        let token_count = response.usage.map(|u| u.completion_tokens).unwrap_or(0);
        Ok(CompletionResult {
            finish_reason: map_finish_reason(choice.finish_reason.as_deref(), !request.stop.is_empty()),
            text: choice.text,
            token_count,
        })
    }

    fn next_token_distribution(
        &self,
        prompt: &str,
        top_k: usize,
    ) -> Result<TokenDistribution, BackendError> {
        let body = CompletionsBody {
            model: self.config.model.as_deref(),
            prompt,
            max_tokens: 1,
            temperature: 1.0,
            top_p: 1.0,
            stop: Vec::new(),
            seed: None,
            logprobs: Some(top_k),
        };
        let response = self.post(&body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Unavailable("response has no choices".into()))?;
        let table = choice
            .logprobs
            .as_ref()
            .and_then(|block| block.top_logprobs.first())
            .ok_or(BackendError::ProbeUnsupported)?;
        TokenDistribution::new(logprobs_to_entries(table), top_k)
    }

    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        // One-token echo call: the server reports the prompt length in its
        // own tokenization.
        let body = CompletionsBody {
            model: self.config.model.as_deref(),
            prompt: text,
            max_tokens: 1,
            temperature: 0.0,
            top_p: 1.0,
            stop: Vec::new(),
            seed: None,
            logprobs: None,
        };
        let response = self.post(&body)?;
        response
            .usage
            .map(|u| u.prompt_tokens)
            .ok_or_else(|| BackendError::Unavailable("response reports no usage".into()))
    }
}
