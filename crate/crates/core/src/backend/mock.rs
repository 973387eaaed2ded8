//! Scripted offline backend.
//!
//! A script is JSON:
//!
//! ```json
//! {
//!   "by_hash": { "<sha256 of prompt>": <reply> },
//!   "rules": [ { "contains": "text" | "regex": "re", "reply": <reply> } ],
//!   "reviews": { "scores": { "<title>": 85.5 }, "default_score": 50, "criteria": 8 },
//!   "default": <reply>,
//!   "latency_ms": 0
//! }
//! ```
//!
//! A reply is a string, `{"sequence": [..]}` (consumed in order, the last
//! one repeats), `{"error": "timeout" | "rate_limited" | {"status", "body"}}`
//! or `{"score": n}`, which answers a review prompt giving every paper in
//! the batch score `n`. Lookup order is hash, rules, review table, default.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::limiter::RateLimiter;
use super::{Backend, BackendError, Completion, CompletionRequest, Usage};
use crate::prompts::{render_reply, CriterionAnswer, ReviewOutcome, Score};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ReplySpec {
    Text(String),
    Sequence { sequence: Vec<ReplySpec> },
    Error { error: ErrorSpec },
    Score { score: Score },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ErrorSpec {
    Kind(String),
    Status {
        status: u16,
        #[serde(default)]
        body: String,
    },
}

#[derive(Debug, Clone, Deserialize)]
struct RawRule {
    contains: Option<String>,
    regex: Option<String>,
    reply: ReplySpec,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReviewTable {
    #[serde(default)]
    pub scores: BTreeMap<String, Score>,
    pub default_score: Option<Score>,
    #[serde(default = "default_criteria")]
    pub criteria: u8,
}

fn default_criteria() -> u8 {
    8
}

#[derive(Debug, Clone, Default, Deserialize)]
struct RawScript {
    #[serde(default)]
    by_hash: HashMap<String, ReplySpec>,
    #[serde(default)]
    rules: Vec<RawRule>,
    reviews: Option<ReviewTable>,
    default: Option<ReplySpec>,
    #[serde(default)]
    latency_ms: u64,
}

enum Matcher {
    Contains(String),
    Regex(Regex),
}

struct Rule {
    matcher: Matcher,
    reply: ReplySpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: u64,
    pub tag: String,
    pub prompt_sha256: String,
    /// Which script entry answered: `hash`, `rule:<i>`, `reviews`, `default`.
    pub matched: String,
}

pub struct MockBackend {
    by_hash: HashMap<String, ReplySpec>,
    rules: Vec<Rule>,
    reviews: Option<ReviewTable>,
    default: Option<ReplySpec>,
    latency: Duration,
    cursors: Mutex<HashMap<String, usize>>,
    calls: Mutex<Vec<CallRecord>>,
    seq: AtomicU64,
    probe: Mutex<Option<Arc<RateLimiter>>>,
    unpermitted: AtomicU64,
    active: AtomicUsize,
    peak: AtomicUsize,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend").field("rules", &self.rules.len()).finish()
    }
}

/// Rough token estimate: one token per four characters.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Titles listed in the `Papers in this batch:` block of a role prompt.
pub fn batch_titles(prompt: &str) -> Vec<String> {
    let Some(start) = prompt.find("Papers in this batch:") else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for line in prompt[start..].lines().skip(1) {
        let Some((num, rest)) = line.split_once(". ") else { break };
        if num.is_empty() || !num.chars().all(|c| c.is_ascii_digit()) {
            break;
        }
        let Some(title) = rest.strip_prefix('\'').and_then(|r| r.strip_suffix('\'')) else { break };
        out.push(title.to_string());
    }
    out
}

/// A well-formed review reply scoring each title as given.
pub fn scripted_review_reply(scored: &[(String, Score)], criteria: u8) -> String {
    let outcomes: Vec<ReviewOutcome> = scored
        .iter()
        .map(|(title, score)| ReviewOutcome {
            paper_id: String::new(),
            title: title.clone(),
            answers: (1..=criteria)
                .map(|c| CriterionAnswer {
                    criterion_id: c,
                    answer: format!("Criterion {c} is addressed by '{title}'."),
                    justification: "The retrieved excerpts support this.".into(),
                })
                .collect(),
            comments: format!("Review of '{title}'."),
            score: *score,
            score_rationale: format!("Score {score} reflects the answers above."),
        })
        .collect();
    render_reply(&outcomes)
}

impl MockBackend {
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let raw: RawScript =
            serde_json::from_str(text).map_err(|e| BackendError::Config(format!("mock script: {e}")))?;
        let mut rules = Vec::with_capacity(raw.rules.len());
        for (i, r) in raw.rules.into_iter().enumerate() {
            let matcher = match (r.contains, r.regex) {
                (Some(s), None) => Matcher::Contains(s),
                (None, Some(re)) => Matcher::Regex(
                    Regex::new(&re).map_err(|e| BackendError::Config(format!("mock rule {i}: {e}")))?,
                ),
                _ => {
                    return Err(BackendError::Config(format!(
                        "mock rule {i} needs exactly one of contains/regex"
                    )))
                }
            };
            rules.push(Rule { matcher, reply: r.reply });
        }
        Ok(Self {
            by_hash: raw.by_hash,
            rules,
            reviews: raw.reviews,
            default: raw.default,
            latency: Duration::from_millis(raw.latency_ms),
            cursors: Mutex::new(HashMap::new()),
            calls: Mutex::new(Vec::new()),
            seq: AtomicU64::new(0),
            probe: Mutex::new(None),
            unpermitted: AtomicU64::new(0),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Counts calls made while `limiter` reports nothing in flight.
    pub fn set_permit_probe(&self, limiter: Arc<RateLimiter>) {
        *self.probe.lock().unwrap() = Some(limiter);
    }

    pub fn unpermitted_calls(&self) -> u64 {
        self.unpermitted.load(Ordering::SeqCst)
    }

    /// Most calls observed in flight at once.
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    fn pick(&self, key: &str, spec: &ReplySpec, prompt: &str) -> Result<String, BackendError> {
        match spec {
            ReplySpec::Text(s) => Ok(s.clone()),
            ReplySpec::Sequence { sequence } => {
                if sequence.is_empty() {
                    return Err(BackendError::Config(format!("empty sequence for {key}")));
                }
                let idx = {
                    let mut cursors = self.cursors.lock().unwrap();
                    let c = cursors.entry(key.to_string()).or_insert(0);
                    let idx = (*c).min(sequence.len() - 1);
                    *c += 1;
                    idx
                };
                self.pick(&format!("{key}/{idx}"), &sequence[idx], prompt)
            }
            ReplySpec::Error { error } => Err(match error {
                ErrorSpec::Kind(k) if k == "timeout" => BackendError::Timeout,
                ErrorSpec::Kind(k) if k == "rate_limited" => BackendError::RateLimited,
                ErrorSpec::Kind(k) => BackendError::Transport(k.clone()),
                ErrorSpec::Status { status: 429, .. } => BackendError::RateLimited,
                ErrorSpec::Status { status, body } => BackendError::Provider {
                    status: *status,
                    body: body.clone(),
                },
            }),
            ReplySpec::Score { score } => {
                let titles = batch_titles(prompt);
                if titles.is_empty() {
                    return Err(BackendError::Config(format!("{key}: score reply for a prompt without a batch")));
                }
                let criteria = self.reviews.as_ref().map_or(8, |r| r.criteria);
                let scored: Vec<(String, Score)> = titles.into_iter().map(|t| (t, *score)).collect();
                Ok(scripted_review_reply(&scored, criteria))
            }
        }
    }

    fn review_table_reply(&self, prompt: &str) -> Option<String> {
        let table = self.reviews.as_ref()?;
        let titles = batch_titles(prompt);
        if titles.is_empty() {
            return None;
        }
        let scored = titles
            .into_iter()
            .map(|t| {
                let s = table.scores.get(&t).copied().or(table.default_score)?;
                Some((t, s))
            })
            .collect::<Option<Vec<_>>>()?;
        Some(scripted_review_reply(&scored, table.criteria))
    }

    fn answer(&self, prompt: &str, hash: &str) -> (String, Result<String, BackendError>) {
        if let Some(spec) = self.by_hash.get(hash) {
            return ("hash".into(), self.pick(&format!("hash:{hash}"), spec, prompt));
        }
        for (i, rule) in self.rules.iter().enumerate() {
            let hit = match &rule.matcher {
                Matcher::Contains(s) => prompt.contains(s.as_str()),
                Matcher::Regex(re) => re.is_match(prompt),
            };
            if hit {
                let key = format!("rule:{i}");
                return (key.clone(), self.pick(&key, &rule.reply, prompt));
            }
        }
        if let Some(reply) = self.review_table_reply(prompt) {
            return ("reviews".into(), Ok(reply));
        }
        match &self.default {
            Some(spec) => ("default".into(), self.pick("default", spec, prompt)),
            None => (
                "none".into(),
                Err(BackendError::Provider {
                    status: 404,
                    body: "no scripted reply for prompt".into(),
                }),
            ),
        }
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        if let Some(l) = self.probe.lock().unwrap().as_ref() {
            if l.in_flight() == 0 {
                self.unpermitted.fetch_add(1, Ordering::SeqCst);
            }
        }
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let hash = sha256_hex(request.prompt.as_bytes());
        let (matched, reply) = self.answer(&request.prompt, &hash);
        self.calls.lock().unwrap().push(CallRecord {
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            tag: request.tag.clone(),
            prompt_sha256: hash,
            matched,
        });
        self.active.fetch_sub(1, Ordering::SeqCst);
        let text = reply?;
        Ok(Completion {
            usage: Usage::new(estimate_tokens(&request.prompt), estimate_tokens(&text)),
            text,
        })
    }
}
