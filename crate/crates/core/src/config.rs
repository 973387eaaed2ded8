//! Run configuration (TOML) and construction of the runtime dependencies.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::http::{HttpBackend, HttpBackendConfig};
use crate::backend::mock::MockBackend;
use crate::backend::{Backend, Caller, Clock, LimiterConfig, Pricing, RateLimiter, RetryPolicy};
use crate::prompts::PromptSet;
use crate::retrieval::{Embedder, HttpEmbedder, MockEmbedder, DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP, DEFAULT_TOP_K};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMode {
    Multimodal,
    #[default]
    TextFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub root: Option<PathBuf>,
    pub format_mode: FormatMode,
    pub template_description: String,
    pub min_body_chars: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            root: None,
            format_mode: FormatMode::TextFallback,
            template_description: "Single-column conference layout: title centered at the top, author block \
                                   below it, then the abstract, followed by numbered sections."
                .into(),
            min_body_chars: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingSection {
    pub batch_size: usize,
    pub seed: u64,
    pub chair_batch_size: usize,
}

impl Default for BatchingSection {
    fn default() -> Self {
        Self {
            batch_size: 3,
            seed: 0,
            chair_batch_size: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuotasSection {
    /// Defaults to ceil(0.35 * corpus size).
    pub final_quota: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub chunk_size: usize,
    pub overlap: usize,
    pub k: usize,
    pub dimension: usize,
    /// Characters of retrieved text per paper in a prompt.
    pub context_budget: usize,
    pub embedder: EmbedderKind,
    pub embed_endpoint: Option<String>,
    pub embed_model: Option<String>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_OVERLAP,
            k: DEFAULT_TOP_K,
            dimension: 256,
            context_budget: 12_000,
            embedder: EmbedderKind::Mock,
            embed_endpoint: None,
            embed_model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Mock script (JSON).
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_output_tokens: Option<u32>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            script: None,
            endpoint: None,
            model: "mock".into(),
            api_key_env: None,
            timeout_secs: 120,
            max_output_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub capacity: u32,
    pub refill_rate: f64,
    pub max_concurrency: usize,
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        Self {
            capacity: 4,
            refill_rate: 2.0,
            max_concurrency: 4,
            max_attempts: 4,
            base_backoff_ms: 500,
            backoff_multiplier: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsSection {
    pub template_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    Overlap,
    Jaccard,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub similarity: SimilarityMetric,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusSection,
    pub batching: BatchingSection,
    pub quotas: QuotasSection,
    pub retrieval: RetrievalSection,
    pub backend: BackendSection,
    pub pricing: Pricing,
    pub limits: LimitsSection,
    pub prompts: PromptsSection,
    pub evaluation: EvaluationSection,
}

impl Config {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.corpus.root);
        fix(&mut self.backend.script);
        fix(&mut self.prompts.template_dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.batching.batch_size < 2 {
            return bad("batching.batch_size must be at least 2");
        }
        if self.batching.chair_batch_size < 2 {
            return bad("batching.chair_batch_size must be at least 2");
        }
        if self.quotas.final_quota == Some(0) {
            return bad("quotas.final_quota must be at least 1");
        }
        let r = &self.retrieval;
        if r.chunk_size == 0 || r.overlap >= r.chunk_size {
            return bad("retrieval.overlap must be smaller than a positive retrieval.chunk_size");
        }
        if r.k == 0 || r.dimension == 0 || r.context_budget == 0 {
            return bad("retrieval.k, retrieval.dimension and retrieval.context_budget must be positive");
        }
        if r.embedder == EmbedderKind::Http && r.embed_endpoint.is_none() {
            return bad("retrieval.embed_endpoint is required for the http embedder");
        }
        match self.backend.kind {
            BackendKind::Mock if self.backend.script.is_none() => return bad("backend.script is required for the mock backend"),
            BackendKind::Http if self.backend.endpoint.is_none() => return bad("backend.endpoint is required for the http backend"),
            _ => {}
        }
        if self.backend.timeout_secs == 0 {
            return bad("backend.timeout_secs must be positive");
        }
        if self.pricing.usd_per_1k_input_tokens.is_sign_negative() || self.pricing.usd_per_1k_output_tokens.is_sign_negative() {
            return bad("pricing must not be negative");
        }
        self.limiter_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let l = &self.limits;
        if l.max_attempts == 0 {
            return bad("limits.max_attempts must be at least 1");
        }
        if !(l.backoff_multiplier.is_finite() && l.backoff_multiplier >= 1.0) {
            return bad("limits.backoff_multiplier must be at least 1");
        }
        Ok(())
    }

    pub fn limiter_config(&self) -> LimiterConfig {
        LimiterConfig {
            capacity: self.limits.capacity,
            refill_rate: self.limits.refill_rate,
            max_concurrency: self.limits.max_concurrency,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.limits.max_attempts,
            base_backoff: Duration::from_millis(self.limits.base_backoff_ms),
            multiplier: self.limits.backoff_multiplier,
            max_invalid_retries: 1,
        }
    }

    pub fn final_quota(&self, corpus_size: usize) -> usize {
        self.quotas
            .final_quota
            .unwrap_or_else(|| (corpus_size * 35).div_ceil(100))
            .max(1)
    }

    /// Stable hash of the effective settings.
    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn prompt_set(&self) -> Result<PromptSet, ConfigError> {
        match &self.prompts.template_dir {
            Some(dir) => PromptSet::from_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(PromptSet::builtin().clone()),
        }
    }

    fn api_key(&self) -> Result<Option<String>, ConfigError> {
        match &self.backend.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| ConfigError::MissingEnv(var.clone())),
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        match self.backend.kind {
            BackendKind::Mock => {
                let script = self
                    .backend
                    .script
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("backend.script is required for the mock backend".into()))?;
                Ok(Arc::new(MockBackend::from_file(script).map_err(|e| ConfigError::Invalid(e.to_string()))?))
            }
            BackendKind::Http => Ok(Arc::new(HttpBackend::new(HttpBackendConfig {
                endpoint: self.backend.endpoint.clone().unwrap_or_default(),
                model: self.backend.model.clone(),
                api_key: self.api_key()?,
                timeout: Duration::from_secs(self.backend.timeout_secs),
                max_output_tokens: self.backend.max_output_tokens,
            }))),
        }
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        let r = &self.retrieval;
        match r.embedder {
            EmbedderKind::Mock => Ok(Arc::new(MockEmbedder::new(r.dimension))),
            EmbedderKind::Http => Ok(Arc::new(HttpEmbedder::new(
                r.embed_endpoint.clone().unwrap_or_default(),
                r.embed_model.clone().unwrap_or_default(),
                self.api_key()?,
                r.dimension,
                Duration::from_secs(self.backend.timeout_secs),
            ))),
        }
    }

    /// Backend, limiter and retry policy wired together.
    pub fn build_caller(&self, backend: Arc<dyn Backend>, clock: Arc<dyn Clock>) -> Result<Caller, ConfigError> {
        let limiter = RateLimiter::new(&self.limiter_config(), clock.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Caller {
            backend,
            limiter: Arc::new(limiter),
            policy: self.retry_policy(),
            clock,
        })
    }
}
