//! Format gate, parallel reviewer batches, chair tournament, and
//! checkpointed resume.

pub mod checkpoint;
pub mod decision;
pub mod partition;
mod pool;
pub mod review;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{accumulate_cost, CallError, RetryError, Usage};
use crate::config::{Config, ConfigError, FormatMode};
use crate::corpus::{Corpus, CorpusError};
use crate::prompts::{PromptError, ReviewOutcome, Role};
use crate::retrieval::{IsolatedIndex, RetrievalError};
use checkpoint::{read_checkpoint, last_log_sequence, Journal, RecordKind, CHECKPOINT_FILE, LOG_FILE};
use decision::{BatchSummary, ChairSummary, FinalDecision, PaperVerdict, Totals, DECISION_FILE};
use partition::{partition, shuffled_slices, BatchAssignment};
use pool::run_pool;
pub use review::{check_format, review_batch, text_gate, BatchResult, Deps, GateOutcome, ReviewEnv};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no run named {0} to resume")]
    ResumeRunNotFound(String),
    #[error("run {0} already has checkpoints; resume it or pick another run id")]
    RunExists(String),
    #[error("config differs from the one run {0} started with")]
    ConfigMismatch(String),
    #[error("checkpoint record {sequence} fails its checksum")]
    ChecksumMismatch { sequence: u64 },
    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("format check reply is neither YES nor NO: {0}")]
    AmbiguousReply(String),
    #[error("paper {0} has no first-page image for the multimodal format check")]
    MissingImage(String),
    #[error("paper {0} is not in the corpus")]
    UnknownPaper(String),
    #[error("backend call failed: {0}")]
    Backend(String),
    #[error("batch {batch_id} ({reviewer_label}) failed after reassignment: {reason}")]
    BatchFailed { batch_id: usize, reviewer_label: String, reason: String },
    #[error("run stopped after {checkpointed} batches were checkpointed")]
    Interrupted { checkpointed: usize },
}

impl PipelineError {
    pub(crate) fn from_call(e: RetryError<CallError>) -> Self {
        let attempts = e.attempts();
        match e.into_inner() {
            CallError::Ambiguous(text) => PipelineError::AmbiguousReply(text),
            CallError::Reply(p) => PipelineError::Prompt(p),
            CallError::Backend(b) => PipelineError::Backend(format!("{b} (after {attempts} attempts)")),
        }
    }
}

/// Where and how a run is stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub run_id: String,
    pub runs_dir: PathBuf,
    pub resume: bool,
    /// Recorded in `run.json` so `resume` can reload the corpus.
    pub corpus_root: Option<PathBuf>,
    /// Stop with `Interrupted` once this many reviewer batches have been
    /// checkpointed by this invocation.
    pub halt_after_batches: Option<usize>,
}

impl RunOptions {
    pub fn new(run_id: impl Into<String>, runs_dir: impl Into<PathBuf>) -> Self {
        Self {
            run_id: run_id.into(),
            runs_dir: runs_dir.into(),
            resume: false,
            corpus_root: None,
            halt_after_batches: None,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.run_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub corpus_id: String,
    pub corpus_root: Option<PathBuf>,
    pub config_fingerprint: String,
    pub config: Config,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::CheckpointCorrupt(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateRecord {
    pub paper_id: String,
    pub passed: bool,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairRecord {
    pub round: usize,
    pub final_ranking: bool,
    pub result: BatchResult,
}

/// The batch plan a run would execute, computed without any backend call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPlan {
    pub corpus_size: usize,
    pub format_mode: FormatMode,
    /// False when the gate needs the backend; every paper is then planned.
    pub gate_applied: bool,
    pub excluded_ids: Vec<String>,
    pub batches: Vec<BatchAssignment>,
    pub final_quota: usize,
    pub chair_batch_size: usize,
}

pub fn plan_run(corpus: &Corpus, config: &Config) -> Result<RunPlan, PipelineError> {
    config.validate()?;
    let gate_applied = config.corpus.format_mode == FormatMode::TextFallback;
    let mut ids = corpus.ids();
    ids.sort();
    let (passed, excluded): (Vec<String>, Vec<String>) = ids.into_iter().partition(|id| {
        !gate_applied || text_gate(corpus.get(id).expect("id from corpus"), config.corpus.min_body_chars)
    });
    Ok(RunPlan {
        corpus_size: corpus.len(),
        format_mode: config.corpus.format_mode,
        gate_applied,
        excluded_ids: excluded,
        batches: partition(&passed, config.batching.batch_size, config.batching.seed),
        final_quota: config.final_quota(corpus.len()),
        chair_batch_size: config.batching.chair_batch_size,
    })
}

fn chair_keep(n: usize) -> usize {
    n.div_ceil(2).max(1)
}

fn chair_seed(seed: u64, round: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(round as u64 + 1)
}

fn reassigned_label(label: &str) -> String {
    format!("{label}-reassigned-1")
}

struct Replay {
    gate: BTreeMap<String, GateRecord>,
    batches: BTreeMap<usize, BatchResult>,
    chair: BTreeMap<(usize, usize), ChairRecord>,
    base_elapsed_ms: u64,
    last_sequence: Option<u64>,
}

fn replay(run_dir: &Path, run_id: &str) -> Result<Replay, PipelineError> {
    let records = read_checkpoint(&run_dir.join(CHECKPOINT_FILE), run_id)?;
    let mut r = Replay {
        gate: BTreeMap::new(),
        batches: BTreeMap::new(),
        chair: BTreeMap::new(),
        base_elapsed_ms: records.iter().map(|x| x.elapsed_ms).max().unwrap_or(0),
        last_sequence: records.last().map(|x| x.sequence),
    };
    if let Some(log_seq) = last_log_sequence(&run_dir.join(LOG_FILE))? {
        r.last_sequence = Some(r.last_sequence.map_or(log_seq, |s| s.max(log_seq)));
    }
    for rec in &records {
        match rec.kind {
            RecordKind::FormatGate => {
                let g: GateRecord = rec.decode()?;
                r.gate.insert(g.paper_id.clone(), g);
            }
            RecordKind::BatchResult => {
                let b: BatchResult = rec.decode()?;
                r.batches.insert(b.batch_id, b);
            }
            RecordKind::ChairResult => {
                let c: ChairRecord = rec.decode()?;
                r.chair.insert((c.round, c.result.batch_id), c);
            }
        }
    }
    Ok(r)
}

struct Run<'a> {
    corpus: &'a Corpus,
    config: &'a Config,
    deps: &'a Deps,
    journal: Journal,
    base_elapsed_ms: u64,
    started: std::time::Duration,
    lost_usage: Usage,
}

impl Run<'_> {
    fn elapsed_ms(&self) -> u64 {
        let now = self.deps.caller.clock.now();
        self.base_elapsed_ms + now.saturating_sub(self.started).as_millis() as u64
    }

    fn log(&mut self, event: &str, fields: serde_json::Value) -> Result<(), PipelineError> {
        let t = self.elapsed_ms();
        self.journal.log(event, fields, t)
    }

    fn checkpoint<T: Serialize>(&mut self, kind: RecordKind, payload: &T) -> Result<(), PipelineError> {
        let t = self.elapsed_ms();
        self.journal.append(kind, payload, t).map(|_| ())
    }
}

/// Runs (or resumes) the whole review and writes `decision.json`.
pub fn run_pipeline(corpus: &Corpus, config: &Config, deps: &Deps, opts: &RunOptions) -> Result<FinalDecision, PipelineError> {
    config.validate()?;
    let run_dir = opts.run_dir();
    let manifest_path = run_dir.join(RUN_FILE);
    if opts.resume {
        if !manifest_path.is_file() {
            return Err(PipelineError::ResumeRunNotFound(opts.run_id.clone()));
        }
        let manifest = RunManifest::read(&run_dir)?;
        if manifest.config_fingerprint != config.fingerprint() {
            return Err(PipelineError::ConfigMismatch(opts.run_id.clone()));
        }
    } else {
        let existing = run_dir.join(CHECKPOINT_FILE);
        if existing.metadata().map(|m| m.len() > 0).unwrap_or(false) {
            return Err(PipelineError::RunExists(opts.run_id.clone()));
        }
        std::fs::create_dir_all(&run_dir).map_err(|source| PipelineError::Io { path: run_dir.clone(), source })?;
        let manifest = RunManifest {
            run_id: opts.run_id.clone(),
            corpus_id: corpus.corpus_id.clone(),
            corpus_root: opts.corpus_root.clone(),
            config_fingerprint: config.fingerprint(),
            config: config.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, text).map_err(|source| PipelineError::Io {
            path: manifest_path.clone(),
            source,
        })?;
    }

    let replayed = replay(&run_dir, &opts.run_id)?;
    let mut run = Run {
        corpus,
        config,
        deps,
        journal: Journal::open(&run_dir, &opts.run_id, replayed.last_sequence)?,
        base_elapsed_ms: replayed.base_elapsed_ms,
        started: deps.caller.clock.now(),
        lost_usage: Usage::default(),
    };
    run.log(
        if opts.resume { "run_resumed" } else { "run_started" },
        json!({
            "corpus_id": corpus.corpus_id,
            "papers": corpus.len(),
            "replayed_gate": replayed.gate.len(),
            "replayed_batches": replayed.batches.len(),
            "replayed_chair": replayed.chair.len(),
        }),
    )?;
    tracing::info!(run_id = %opts.run_id, resume = opts.resume, papers = corpus.len(), "pipeline start");

    let gate = format_gate(&mut run, replayed.gate)?;
    let passed: Vec<String> = gate.values().filter(|g| g.passed).map(|g| g.paper_id.clone()).collect();
    run.log("format_gate_done", json!({ "passed": passed.len(), "failed": gate.len() - passed.len() }))?;

    let index = IsolatedIndex::new(deps.embedder.dimension());
    index_papers(&run, &index, &passed)?;

    let assignments = partition(&passed, config.batching.batch_size, config.batching.seed);
    let batches = reviewer_phase(&mut run, &index, &assignments, replayed.batches, opts.halt_after_batches)?;

    let mut latest: BTreeMap<String, (ReviewOutcome, Role)> = BTreeMap::new();
    let mut first_round = BTreeSet::new();
    for b in batches.values() {
        for o in &b.outcomes {
            latest.insert(o.paper_id.clone(), (o.clone(), Role::Reviewer));
        }
        first_round.extend(b.advanced_ids.iter().cloned());
    }

    let final_quota = config.final_quota(corpus.len());
    let (accepted, chair_records) = chair_phase(&mut run, &index, &first_round, final_quota, &latest, replayed.chair)?;
    for c in &chair_records {
        for o in &c.result.outcomes {
            latest.insert(o.paper_id.clone(), (o.clone(), Role::Chair));
        }
    }

    let gate_usage: Usage = gate.values().map(|g| g.usage).sum();
    let batch_usage: Usage = batches.values().map(|b| b.usage).sum();
    let chair_usage: Usage = chair_records.iter().map(|c| c.result.usage).sum();
    let usage = gate_usage + batch_usage + chair_usage + run.lost_usage;
    let decision = FinalDecision {
        run_id: opts.run_id.clone(),
        gate_passed_ids: passed.iter().cloned().collect(),
        first_round_ids: first_round,
        accepted_ids: accepted.into_iter().collect(),
        per_paper: latest
            .into_iter()
            .map(|(id, (o, stage))| {
                (
                    id,
                    PaperVerdict {
                        score: o.score,
                        comments: o.comments,
                        stage,
                    },
                )
            })
            .collect(),
        batches: batches
            .values()
            .map(|b| BatchSummary {
                batch_id: b.batch_id,
                reviewer_label: b.reviewer_label.clone(),
                paper_ids: b.paper_ids.clone(),
                advanced_ids: b.advanced_ids.clone(),
                usage: b.usage,
                wall_time_ms: b.wall_time_ms,
            })
            .collect(),
        chair: chair_records
            .iter()
            .map(|c| ChairSummary {
                round: c.round,
                index: c.result.batch_id,
                final_ranking: c.final_ranking,
                paper_ids: c.result.paper_ids.clone(),
                kept_ids: c.result.advanced_ids.clone(),
                usage: c.result.usage,
                wall_time_ms: c.result.wall_time_ms,
            })
            .collect(),
        totals: Totals {
            wall_time_ms: run.elapsed_ms(),
            usage,
            cost_usd: accumulate_cost(&[usage], &config.pricing),
        },
    };
    decision.write(&run_dir.join(DECISION_FILE))?;
    run.log(
        "decision",
        json!({ "accepted": decision.accepted_ids.len(), "first_round": decision.first_round_ids.len() }),
    )?;
    tracing::info!(run_id = %opts.run_id, accepted = decision.accepted_ids.len(), "pipeline done");
    Ok(decision)
}

fn format_gate(run: &mut Run<'_>, mut done: BTreeMap<String, GateRecord>) -> Result<BTreeMap<String, GateRecord>, PipelineError> {
    let mut ids = run.corpus.ids();
    ids.sort();
    let pending: Vec<String> = ids.into_iter().filter(|id| !done.contains_key(id)).collect();
    let corpus = run.corpus;
    let section = run.config.corpus.clone();
    let deps = run.deps;
    let workers = run.config.limits.max_concurrency;
    run_pool::<_, _, PipelineError, _, _>(
        pending,
        workers,
        |id: &String| check_format(corpus.get(id).expect("id from corpus"), &section, deps),
        |id, outcome| {
            let g = outcome?;
            let record = GateRecord {
                paper_id: id,
                passed: g.passed,
                usage: g.usage,
            };
            run.checkpoint(RecordKind::FormatGate, &record)?;
            done.insert(record.paper_id.clone(), record);
            Ok(None)
        },
    )?;
    Ok(done)
}

fn index_papers(run: &Run<'_>, index: &IsolatedIndex, ids: &[String]) -> Result<(), PipelineError> {
    let r = &run.config.retrieval;
    let embedder = run.deps.embedder.as_ref();
    let corpus = run.corpus;
    run_pool(
        ids.to_vec(),
        run.config.limits.max_concurrency,
        |id: &String| index.index_paper(corpus.get(id).expect("id from corpus"), embedder, r.chunk_size, r.overlap),
        |_, res| res.map(|_| None).map_err(PipelineError::from),
    )
}

fn reviewer_phase(
    run: &mut Run<'_>,
    index: &IsolatedIndex,
    assignments: &[BatchAssignment],
    mut done: BTreeMap<usize, BatchResult>,
    halt_after: Option<usize>,
) -> Result<BTreeMap<usize, BatchResult>, PipelineError> {
    for (id, b) in &done {
        match assignments.get(*id) {
            Some(a) if a.paper_ids == b.paper_ids => {}
            _ => {
                return Err(PipelineError::CheckpointCorrupt(format!(
                    "checkpointed batch {id} does not match the current plan"
                )))
            }
        }
    }
    let pending: Vec<BatchAssignment> = assignments.iter().filter(|a| !done.contains_key(&a.batch_id)).cloned().collect();
    run.log("reviewer_phase", json!({ "batches": assignments.len(), "pending": pending.len() }))?;
    if halt_after == Some(0) && !pending.is_empty() {
        return Err(PipelineError::Interrupted { checkpointed: 0 });
    }
    let env = ReviewEnv {
        corpus: run.corpus,
        index,
        deps: run.deps,
        config: run.config,
        prior: None,
    };
    let mut completed = 0usize;
    run_pool(
        pending,
        run.config.limits.max_concurrency,
        |a: &BatchAssignment| review_batch(a, Role::Reviewer, &env),
        |mut a, res| match res {
            Ok(result) => {
                run.checkpoint(RecordKind::BatchResult, &result)?;
                run.log(
                    "batch_done",
                    json!({ "batch_id": result.batch_id, "label": result.reviewer_label, "advanced": result.advanced_ids }),
                )?;
                done.insert(result.batch_id, result);
                completed += 1;
                if halt_after == Some(completed) {
                    return Err(PipelineError::Interrupted { checkpointed: completed });
                }
                Ok(None)
            }
            Err(failure) => {
                run.lost_usage += failure.usage;
                let reason = failure.error.to_string();
                tracing::warn!(batch = a.batch_id, label = %a.reviewer_label, %reason, "batch failed");
                if a.reviewer_label.ends_with("-reassigned-1") {
                    run.log("batch_aborted", json!({ "batch_id": a.batch_id, "label": a.reviewer_label, "reason": reason }))?;
                    return Err(PipelineError::BatchFailed {
                        batch_id: a.batch_id,
                        reviewer_label: a.reviewer_label,
                        reason,
                    });
                }
                let label = reassigned_label(&a.reviewer_label);
                run.log(
                    "batch_reassigned",
                    json!({ "batch_id": a.batch_id, "from": a.reviewer_label, "to": label, "reason": reason }),
                )?;
                a.reviewer_label = label;
                Ok(Some(a))
            }
        },
    )?;
    Ok(done)
}

fn chair_phase(
    run: &mut Run<'_>,
    index: &IsolatedIndex,
    first_round: &BTreeSet<String>,
    final_quota: usize,
    latest: &BTreeMap<String, (ReviewOutcome, Role)>,
    mut replayed: BTreeMap<(usize, usize), ChairRecord>,
) -> Result<(Vec<String>, Vec<ChairRecord>), PipelineError> {
    let prior: BTreeMap<String, ReviewOutcome> = latest.iter().map(|(k, (o, _))| (k.clone(), o.clone())).collect();
    let env = ReviewEnv {
        corpus: run.corpus,
        index,
        deps: run.deps,
        config: run.config,
        prior: Some(&prior),
    };
    let mut remaining: Vec<String> = first_round.iter().cloned().collect();
    let mut records = Vec::new();
    let mut round = 0;
    let chair_batch = run.config.batching.chair_batch_size;
    let seed = run.config.batching.seed;

    let mut run_round = |run: &mut Run<'_>, round: usize, final_ranking: bool, jobs: Vec<BatchAssignment>| -> Result<Vec<ChairRecord>, PipelineError> {
        let mut got: BTreeMap<usize, ChairRecord> = BTreeMap::new();
        let mut pending = Vec::new();
        for job in jobs {
            match replayed.remove(&(round, job.batch_id)) {
                Some(rec) if rec.result.paper_ids == job.paper_ids && rec.final_ranking == final_ranking => {
                    got.insert(job.batch_id, rec);
                }
                Some(_) => {
                    return Err(PipelineError::CheckpointCorrupt(format!(
                        "checkpointed chair batch {round}/{} does not match the current plan",
                        job.batch_id
                    )))
                }
                None => pending.push(job),
            }
        }
        run_pool(
            pending,
            run.config.limits.max_concurrency,
            |a: &BatchAssignment| review_batch(a, Role::Chair, &env),
            |mut a, res| match res {
                Ok(result) => {
                    let rec = ChairRecord {
                        round,
                        final_ranking,
                        result,
                    };
                    run.checkpoint(RecordKind::ChairResult, &rec)?;
                    run.log(
                        "chair_batch_done",
                        json!({ "round": round, "index": rec.result.batch_id, "kept": rec.result.advanced_ids }),
                    )?;
                    got.insert(rec.result.batch_id, rec);
                    Ok(None)
                }
                Err(failure) => {
                    run.lost_usage += failure.usage;
                    let reason = failure.error.to_string();
                    if a.reviewer_label.ends_with("-reassigned-1") {
                        return Err(PipelineError::BatchFailed {
                            batch_id: a.batch_id,
                            reviewer_label: a.reviewer_label,
                            reason,
                        });
                    }
                    let label = reassigned_label(&a.reviewer_label);
                    run.log("chair_batch_reassigned", json!({ "round": round, "to": label, "reason": reason }))?;
                    a.reviewer_label = label;
                    Ok(Some(a))
                }
            },
        )?;
        Ok(got.into_values().collect())
    };

    while 2 * remaining.len() > 3 * final_quota {
        let jobs: Vec<BatchAssignment> = shuffled_slices(&remaining, chair_batch, chair_seed(seed, round))
            .into_iter()
            .enumerate()
            .map(|(i, ids)| BatchAssignment {
                batch_id: i,
                reviewer_label: format!("chair-r{round}-{i}"),
                advance_quota: chair_keep(ids.len()),
                paper_ids: ids,
            })
            .collect();
        run.log("chair_round", json!({ "round": round, "papers": remaining.len(), "batches": jobs.len() }))?;
        let recs = run_round(run, round, false, jobs)?;
        let mut kept: Vec<String> = recs.iter().flat_map(|r| r.result.advanced_ids.iter().cloned()).collect();
        kept.sort();
        remaining = kept;
        records.extend(recs);
        round += 1;
    }
    if remaining.len() > final_quota {
        let job = BatchAssignment {
            batch_id: 0,
            reviewer_label: "chair-final".into(),
            advance_quota: final_quota,
            paper_ids: remaining.clone(),
        };
        run.log("chair_final_ranking", json!({ "round": round, "papers": remaining.len() }))?;
        let recs = run_round(run, round, true, vec![job])?;
        let mut kept: Vec<String> = recs.iter().flat_map(|r| r.result.advanced_ids.iter().cloned()).collect();
        kept.sort();
        remaining = kept;
        records.extend(recs);
    }
    Ok((remaining, records))
}
