//! Token-bucket admission plus a concurrency cap for backend calls.
//!
//! The bucket is kept in GCRA form (a theoretical arrival time) in integer
//! nanoseconds, so a call granted at `t` is exact and any window of length
//! `w` admits at most `capacity + w * refill_rate` calls.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::clock::Clock;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LimiterError {
    #[error("limiter is shutting down")]
    ShutdownInProgress,
    #[error("invalid limiter settings: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimiterConfig {
    pub capacity: u32,
    /// Tokens per second.
    pub refill_rate: f64,
    pub max_concurrency: usize,
}

impl Default for LimiterConfig {
    fn default() -> Self {
        Self {
            capacity: 4,
            refill_rate: 2.0,
            max_concurrency: 4,
        }
    }
}

impl LimiterConfig {
    pub fn validate(&self) -> Result<(), LimiterError> {
        if self.capacity == 0 {
            return Err(LimiterError::InvalidConfig("capacity must be at least 1".into()));
        }
        if !(self.refill_rate.is_finite() && self.refill_rate > 0.0) {
            return Err(LimiterError::InvalidConfig("refill_rate must be positive".into()));
        }
        if self.max_concurrency == 0 {
            return Err(LimiterError::InvalidConfig("max_concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TokenBucket {
    period_ns: u128,
    tolerance_ns: u128,
    tat_ns: u128,
}

impl TokenBucket {
    pub fn new(capacity: u32, refill_rate: f64) -> Result<Self, LimiterError> {
        LimiterConfig {
            capacity,
            refill_rate,
            max_concurrency: 1,
        }
        .validate()?;
        let period_ns = (1e9 / refill_rate).ceil().max(1.0) as u128;
        Ok(Self {
            period_ns,
            tolerance_ns: (capacity as u128 - 1) * period_ns,
            tat_ns: 0,
        })
    }

    /// Reserves the next token for a request arriving at `now` and returns
    /// the instant it may proceed.
    pub fn reserve(&mut self, now: Duration) -> Duration {
        let t = now.as_nanos();
        let grant = t.max(self.tat_ns.saturating_sub(self.tolerance_ns));
        self.tat_ns = self.tat_ns.max(grant) + self.period_ns;
        nanos(grant)
    }
}

fn nanos(n: u128) -> Duration {
    Duration::new((n / 1_000_000_000) as u64, (n % 1_000_000_000) as u32)
}

pub struct RateLimiter {
    bucket: Mutex<TokenBucket>,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
    max_concurrency: usize,
    shutdown: AtomicBool,
    clock: Arc<dyn Clock>,
    grants: Mutex<Vec<Duration>>,
}

impl std::fmt::Debug for RateLimiter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RateLimiter")
            .field("max_concurrency", &self.max_concurrency)
            .field("in_flight", &self.in_flight())
            .finish()
    }
}

/// Held for the duration of one backend call.
#[derive(Debug)]
pub struct Permit<'a> {
    limiter: &'a RateLimiter,
    pub granted_at: Duration,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().unwrap();
        *n -= 1;
        self.limiter.slot_freed.notify_one();
    }
}

impl RateLimiter {
    pub fn new(config: &LimiterConfig, clock: Arc<dyn Clock>) -> Result<Self, LimiterError> {
        config.validate()?;
        Ok(Self {
            bucket: Mutex::new(TokenBucket::new(config.capacity, config.refill_rate)?),
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
            max_concurrency: config.max_concurrency,
            shutdown: AtomicBool::new(false),
            clock,
            grants: Mutex::new(Vec::new()),
        })
    }

    /// Blocks until a concurrency slot and a token are both available.
    pub fn acquire(&self) -> Result<Permit<'_>, LimiterError> {
        {
            let mut n = self.in_flight.lock().unwrap();
            loop {
                if self.shutdown.load(Ordering::SeqCst) {
                    return Err(LimiterError::ShutdownInProgress);
                }
                if *n < self.max_concurrency {
                    *n += 1;
                    break;
                }
                n = self.slot_freed.wait(n).unwrap();
            }
        }
        let mut permit = Permit {
            limiter: self,
            granted_at: Duration::ZERO,
        };
        let grant = {
            let now = self.clock.now();
            self.bucket.lock().unwrap().reserve(now)
        };
        self.clock.sleep_until(grant);
        if self.shutdown.load(Ordering::SeqCst) {
            return Err(LimiterError::ShutdownInProgress);
        }
        self.grants.lock().unwrap().push(grant);
        permit.granted_at = grant;
        Ok(permit)
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap()
    }

    pub fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    /// Grant instants so far, in grant order.
    pub fn grants(&self) -> Vec<Duration> {
        self.grants.lock().unwrap().clone()
    }

    /// Wakes every waiter; pending and future acquisitions fail.
    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _guard = self.in_flight.lock().unwrap();
        self.slot_freed.notify_all();
    }
}
