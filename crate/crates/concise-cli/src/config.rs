//! Configuration file loading, flag overrides, and backend construction.

use anyhow::{bail, Context, Result};
use concise::backend::{HttpBackend, HttpBackendConfig, ScriptedBackend};
use concise::{Backend, PipelineConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable consulted for the API key when the backend spec
/// does not name one.
pub const DEFAULT_API_KEY_ENV: &str = "CONCISE_API_KEY";

/// Which model backend to drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Deterministic scripted backend loaded from a JSON script file.
    Script {
        /// Path to the script JSON.
        path: PathBuf,
    },
    /// OpenAI-compatible completions endpoint.
    Http {
        /// Base URL, e.g. `http://localhost:8000/v1`.
        base_url: String,
        /// Model name sent with each request.
        #[serde(default)]
        model: Option<String>,
        /// Environment variable holding the API key (secrets never live
        /// in the config file).
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Script {
            path: PathBuf::from("script.json"),
        }
    }
}

/// Settings for the annotate command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    /// Chains with more step tokens than this are flagged unreliable in
    /// judge mode.
    pub judge_token_cap: usize,
    /// Token cap for judge completions.
    pub judge_max_tokens: usize,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            judge_token_cap: 5000,
            judge_max_tokens: 512,
        }
    }
}

/// Settings for plain baseline sampling during dataset construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Plain samples drawn per task.
    pub plain_samples: usize,
    /// Sampling temperature for those draws.
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            plain_samples: 2,
            temperature: 1.0,
        }
    }
}

/// The whole configuration file. Every field has a default, so `{}` is a
/// valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    /// Backend selection.
    pub backend: BackendSpec,
    /// Pipeline settings shared by every command.
    pub pipeline: PipelineConfig,
    /// Worker threads for per-task parallelism.
    pub parallelism: usize,
    /// Root directory for all artifacts.
    pub out_dir: PathBuf,
    /// Annotate-command settings.
    pub annotate: AnnotateConfig,
    /// Baseline-sampling settings.
    pub sampling: SamplingConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            backend: BackendSpec::default(),
            pipeline: PipelineConfig::default(),
            parallelism: 1,
            out_dir: PathBuf::from("out"),
            annotate: AnnotateConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl GlobalConfig {
    /// Loads the config file when given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => GlobalConfig::default(),
        };
        config.validate()?;
        Ok(config)
    }

    /// Rejects settings no command can run with.
    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        Ok(())
    }

    /// Builds the configured backend. Script paths are resolved and read
    /// here so a bad path fails before any work starts.
    pub fn make_backend(&self) -> Result<Box<dyn Backend>> {
        match &self.backend {
            BackendSpec::Script { path } => {
                let backend = ScriptedBackend::from_path(path)
                    .with_context(|| format!("loading script {}", path.display()))?;
                Ok(Box::new(backend))
            }
            BackendSpec::Http {
                base_url,
                model,
                api_key_env,
            } => {
                let env_name = api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
                let mut http = HttpBackendConfig::new(base_url.clone());
                http.api_key = std::env::var(env_name).ok();
                http.model = model.clone();
                let backend = HttpBackend::new(http).context("building http backend")?;
                Ok(Box::new(backend))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid_defaults() {
        let config: GlobalConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, GlobalConfig::default());
        assert_eq!(config.parallelism, 1);
        assert_eq!(config.pipeline.detector.threshold, 0.5);
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = GlobalConfig::default();
        let json = serde_json::to_string(&config).unwrap();
        let back: GlobalConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<GlobalConfig>(r#"{"paralellism": 2}"#).is_err());
    }

    #[test]
    fn zero_parallelism_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"parallelism": 0}"#).unwrap();
        assert!(GlobalConfig::load(Some(&path)).is_err());
    }

    #[test]
    fn backend_spec_selects_kind_by_tag() {
        let spec: BackendSpec =
            serde_json::from_str(r#"{"kind":"http","base_url":"http://h/v1"}"#).unwrap();
        assert!(matches!(spec, BackendSpec::Http { .. }));
        let spec: BackendSpec =
            serde_json::from_str(r#"{"kind":"script","path":"s.json"}"#).unwrap();
        assert!(matches!(spec, BackendSpec::Script { .. }));
    }

    #[test]
    fn missing_script_file_fails_at_construction() {
        let config = GlobalConfig {
            backend: BackendSpec::Script {
                path: PathBuf::from("/nonexistent/script.json"),
            },
            ..GlobalConfig::default()
        };
        assert!(config.make_backend().is_err());
    }
}
