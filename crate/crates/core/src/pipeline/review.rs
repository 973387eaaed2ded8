//! One reviewer (or chair) completion over a batch, and the format gate.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::partition::BatchAssignment;
use super::PipelineError;
use crate::backend::{Backend, CallError, Caller, Clock, CompletionRequest, SystemClock, Usage};
use crate::config::{Config, ConfigError, CorpusSection, FormatMode};
use crate::corpus::{Corpus, PaperRecord, SectionKind};
use crate::prompts::{parse_review_reply, ExpectedPaper, PromptSet, ReviewOutcome, Role};
use crate::retrieval::{assemble_context, Embedder, IsolatedIndex, ScoredChunk};

/// Shared runtime dependencies.
#[derive(Clone)]
pub struct Deps {
    pub caller: Caller,
    pub embedder: Arc<dyn Embedder>,
    pub prompts: Arc<PromptSet>,
}

impl Deps {
    /// Wires `backend` with the config's limiter, retry policy, embedder
    /// and prompt templates.
    pub fn new(config: &Config, backend: Arc<dyn Backend>, clock: Arc<dyn Clock>) -> Result<Self, ConfigError> {
        Ok(Self {
            caller: config.build_caller(backend, clock)?,
            embedder: config.build_embedder()?,
            prompts: Arc::new(config.prompt_set()?),
        })
    }

    /// Everything from config, on the system clock.
    pub fn from_config(config: &Config) -> Result<Self, ConfigError> {
        Self::new(config, config.build_backend()?, Arc::new(SystemClock::new()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchResult {
    pub batch_id: usize,
    pub reviewer_label: String,
    pub role: Role,
    pub paper_ids: Vec<String>,
    pub outcomes: Vec<ReviewOutcome>,
    pub advanced_ids: Vec<String>,
    pub usage: Usage,
    pub attempts: u32,
    pub wall_time_ms: u64,
}

#[derive(Debug)]
pub struct BatchFailure {
    pub batch_id: usize,
    pub reviewer_label: String,
    pub error: PipelineError,
    pub usage: Usage,
}

/// What a batch review needs besides the assignment.
#[derive(Clone, Copy)]
pub struct ReviewEnv<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a IsolatedIndex,
    pub deps: &'a Deps,
    pub config: &'a Config,
    /// Earlier assessments shown to the chair.
    pub prior: Option<&'a BTreeMap<String, ReviewOutcome>>,
}

/// Score descending, then paper id ascending.
pub fn rank_outcomes(outcomes: &[ReviewOutcome]) -> Vec<&ReviewOutcome> {
    let mut v: Vec<&ReviewOutcome> = outcomes.iter().collect();
    v.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.paper_id.cmp(&b.paper_id)));
    v
}

pub fn select_top(outcomes: &[ReviewOutcome], quota: usize) -> Vec<String> {
    rank_outcomes(outcomes)
        .into_iter()
        .take(quota)
        .map(|o| o.paper_id.clone())
        .collect()
}

/// Retrieved context for one paper: the top-k chunks for every criterion
/// question, merged and packed into the configured budget.
pub fn paper_context(paper: &PaperRecord, index: &IsolatedIndex, deps: &Deps, config: &Config) -> Result<String, PipelineError> {
    let mut merged: BTreeMap<String, ScoredChunk> = BTreeMap::new();
    for q in deps.prompts.questions() {
        let hits = index.retrieve(&paper.paper_id, &q.render(&paper.title), config.retrieval.k, deps.embedder.as_ref())?;
        for hit in hits {
            match merged.get_mut(&hit.entry.chunk_id) {
                Some(existing) if existing.score >= hit.score => {}
                _ => {
                    merged.insert(hit.entry.chunk_id.clone(), hit);
                }
            }
        }
    }
    let chunks: Vec<ScoredChunk> = merged.into_values().collect();
    Ok(assemble_context(&chunks, config.retrieval.context_budget))
}

pub fn batch_prompt(assignment: &BatchAssignment, role: Role, env: &ReviewEnv<'_>) -> Result<String, PipelineError> {
    let papers = assignment
        .paper_ids
        .iter()
        .map(|id| env.corpus.get(id).ok_or_else(|| PipelineError::UnknownPaper(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let titles: Vec<String> = papers.iter().map(|p| p.title.clone()).collect();
    let bundle = match role {
        Role::Reviewer => env.deps.prompts.reviewer_prompt(&titles, assignment.advance_quota)?,
        Role::Chair => env.deps.prompts.chair_prompt(&titles, assignment.advance_quota)?,
    };
    let mut prompt = bundle.render();
    for paper in papers {
        let context = paper_context(paper, env.index, env.deps, env.config)?;
        prompt.push_str(&format!("\n\n--- Paper '{}' (id {}) ---\nRetrieved excerpts:\n{}", paper.title, paper.paper_id, context));
        if let Some(prev) = env.prior.and_then(|p| p.get(&paper.paper_id)) {
            prompt.push_str(&format!("\nReviewer assessment (score {}): {}", prev.score, prev.comments));
        }
    }
    Ok(prompt)
}

fn now_ms(caller: &Caller) -> u64 {
    caller.clock.now().as_millis() as u64
}

/// Issues one completion for the whole batch, parses it, and keeps the top
/// `advance_quota` papers.
pub fn review_batch(assignment: &BatchAssignment, role: Role, env: &ReviewEnv<'_>) -> Result<BatchResult, BatchFailure> {
    let fail = |error: PipelineError, usage: Usage| BatchFailure {
        batch_id: assignment.batch_id,
        reviewer_label: assignment.reviewer_label.clone(),
        error,
        usage,
    };
    let caller = &env.deps.caller;
    let started = now_ms(caller);
    let prompt = batch_prompt(assignment, role, env).map_err(|e| fail(e, Usage::default()))?;
    let expected: Vec<ExpectedPaper> = assignment
        .paper_ids
        .iter()
        .map(|id| ExpectedPaper::new(id, &env.corpus.get(id).expect("checked in batch_prompt").title))
        .collect();
    let criterion_ids = env.deps.prompts.criterion_ids();
    let mut request = CompletionRequest::new(prompt, assignment.reviewer_label.clone());
    request.max_output_tokens = env.config.backend.max_output_tokens;
    let out = caller.call(&request, |text| {
        parse_review_reply(text, &expected, &criterion_ids).map_err(CallError::from)
    });
    let outcomes = out.value.map_err(|e| fail(PipelineError::from_call(e), out.usage))?;
    let advanced_ids = select_top(&outcomes, assignment.advance_quota);
    Ok(BatchResult {
        batch_id: assignment.batch_id,
        reviewer_label: assignment.reviewer_label.clone(),
        role,
        paper_ids: assignment.paper_ids.clone(),
        outcomes,
        advanced_ids,
        usage: out.usage,
        attempts: out.attempts,
        wall_time_ms: now_ms(caller).saturating_sub(started),
    })
}

/// Text-only layout check: title, abstract, some body, enough body text.
pub fn text_gate(paper: &PaperRecord, min_body_chars: usize) -> bool {
    let s = &paper.sections;
    let body_chars: usize = s
        .iter()
        .filter(|sec| sec.kind.is_body())
        .map(|sec| sec.body.trim().chars().count())
        .sum();
    s.has(SectionKind::Title)
        && s.has(SectionKind::Abstract)
        && s.iter().any(|sec| sec.kind.is_body())
        && body_chars >= min_body_chars
}

fn yes_no(reply: &str) -> Result<bool, CallError> {
    let first = reply
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_uppercase();
    match first.as_str() {
        "YES" => Ok(true),
        "NO" => Ok(false),
        _ => Err(CallError::Ambiguous(reply.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub passed: bool,
    pub usage: Usage,
}

pub fn check_format(paper: &PaperRecord, corpus: &CorpusSection, deps: &Deps) -> Result<GateOutcome, PipelineError> {
    match corpus.format_mode {
        FormatMode::TextFallback => Ok(GateOutcome {
            passed: text_gate(paper, corpus.min_body_chars),
            usage: Usage::default(),
        }),
        FormatMode::Multimodal => {
            let image = paper
                .first_page_image_path
                .as_ref()
                .ok_or_else(|| PipelineError::MissingImage(paper.paper_id.clone()))?;
            let prompt = deps
                .prompts
                .format_prompt(&corpus.template_description, &image.display().to_string());
            let mut request = CompletionRequest::new(prompt, format!("format-{}", paper.paper_id));
            request.image_path = Some(image.clone());
            let out = deps.caller.call(&request, yes_no);
            let passed = out.value.map_err(PipelineError::from_call)?;
            Ok(GateOutcome { passed, usage: out.usage })
        }
    }
}
