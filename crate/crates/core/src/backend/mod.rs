//! Completion backends and the shared call path (limiter, retry, usage).

pub mod clock;
pub mod cost;
pub mod http;
pub mod limiter;
pub mod mock;
pub mod retry;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::PromptError;
pub use clock::{Clock, SystemClock, VirtualClock};
pub use cost::{accumulate_cost, Pricing, Usage};
pub use limiter::{LimiterConfig, LimiterError, RateLimiter};
pub use retry::{with_retry, RetryClass, RetryError, RetryPolicy, Retryable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    /// First-page image to attach for multimodal checks.
    pub image_path: Option<PathBuf>,
    /// Free-form label for logs and the mock call ledger.
    pub tag: String,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, tag: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: None,
            image_path: None,
            tag: tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("provider is throttling requests")]
    RateLimited,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("unusable provider response: {0}")]
    BadResponse(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("shutdown in progress")]
    ShutdownInProgress,
}

impl Retryable for BackendError {
    fn retry_class(&self) -> RetryClass {
        match self {
            BackendError::Timeout | BackendError::RateLimited | BackendError::Transport(_) => RetryClass::Transient,
            BackendError::Provider { status, .. } if *status >= 500 => RetryClass::Transient,
            BackendError::BadResponse(_) => RetryClass::InvalidReply,
            _ => RetryClass::Fatal,
        }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;
}

/// Failure of one attempt on the shared call path.
#[derive(Debug, Error)]
pub enum CallError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Reply(#[from] PromptError),
    #[error("ambiguous reply: {0}")]
    Ambiguous(String),
}

impl Retryable for CallError {
    fn retry_class(&self) -> RetryClass {
        match self {
            CallError::Backend(e) => e.retry_class(),
            CallError::Reply(
                PromptError::MalformedReply(_) | PromptError::MissingPaper(_) | PromptError::ScoreOutOfRange { .. },
            )
            | CallError::Ambiguous(_) => RetryClass::InvalidReply,
            CallError::Reply(_) => RetryClass::Fatal,
        }
    }
}

/// Result of a validated call, with usage from every attempt.
#[derive(Debug)]
pub struct CallOutcome<T> {
    pub value: Result<T, RetryError<CallError>>,
    pub usage: Usage,
    pub attempts: u32,
}

/// Everything a call needs: backend, limiter, retry policy, clock.
#[derive(Clone)]
pub struct Caller {
    pub backend: Arc<dyn Backend>,
    pub limiter: Arc<RateLimiter>,
    pub policy: RetryPolicy,
    pub clock: Arc<dyn Clock>,
}

impl Caller {
    /// Issues `request` under the limiter, validating each reply with
    /// `validate`; transient failures back off, invalid replies are
    /// re-asked with the same prompt.
    pub fn call<T>(
        &self,
        request: &CompletionRequest,
        mut validate: impl FnMut(&str) -> Result<T, CallError>,
    ) -> CallOutcome<T> {
        let mut usage = Usage::default();
        let mut attempts = 0;
        let value = with_retry(&self.policy, self.clock.as_ref(), |attempt| {
            attempts = attempt;
            let completion = {
                let _permit = self.limiter.acquire().map_err(|_| BackendError::ShutdownInProgress)?;
                self.backend.complete(request)?
            };
            usage += completion.usage;
            validate(&completion.text)
        });
        CallOutcome { value, usage, attempts }
    }
}
