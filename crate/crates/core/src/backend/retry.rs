//! Bounded retries with exponential backoff.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryClass {
    /// Timeouts, transport failures, throttling, 5xx.
    Transient,
    /// The reply arrived but failed validation; re-asked at most once.
    InvalidReply,
    Fatal,
}

pub trait Retryable {
    fn retry_class(&self) -> RetryClass;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub multiplier: f64,
    pub max_invalid_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_backoff: Duration::from_millis(500),
            multiplier: 2.0,
            max_invalid_retries: 1,
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1) as i32;
        self.base_backoff.mul_f64(self.multiplier.powi(exp))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetryError<E> {
    Exhausted { attempts: u32, last: E },
    Fatal { attempts: u32, error: E },
}

impl<E> RetryError<E> {
    pub fn into_inner(self) -> E {
        match self {
            RetryError::Exhausted { last, .. } => last,
            RetryError::Fatal { error, .. } => error,
        }
    }

    pub fn attempts(&self) -> u32 {
        match self {
            RetryError::Exhausted { attempts, .. } | RetryError::Fatal { attempts, .. } => *attempts,
        }
    }
}

impl<E: std::fmt::Display> std::fmt::Display for RetryError<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetryError::Exhausted { attempts, last } => write!(f, "gave up after {attempts} attempts: {last}"),
            RetryError::Fatal { error, .. } => write!(f, "{error}"),
        }
    }
}

impl<E: std::fmt::Debug + std::fmt::Display> std::error::Error for RetryError<E> {}

/// Runs `op` with the 1-based attempt number until it succeeds, fails
/// fatally, or the policy runs out.
pub fn with_retry<T, E, F>(policy: &RetryPolicy, clock: &dyn Clock, mut op: F) -> Result<T, RetryError<E>>
where
    E: Retryable,
    F: FnMut(u32) -> Result<T, E>,
{
    let max = policy.max_attempts.max(1);
    let mut invalid = 0;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let err = match op(attempt) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        match err.retry_class() {
            RetryClass::Fatal => return Err(RetryError::Fatal { attempts: attempt, error: err }),
            RetryClass::InvalidReply => {
                invalid += 1;
                if invalid > policy.max_invalid_retries || attempt >= max {
                    return Err(RetryError::Exhausted { attempts: attempt, last: err });
                }
            }
            RetryClass::Transient => {
                if attempt >= max {
                    return Err(RetryError::Exhausted { attempts: attempt, last: err });
                }
                clock.sleep(policy.backoff(attempt));
            }
        }
    }
}
