//! C ABI over the review engine.
//!
//! Every function returns a `PrStatus`. On failure the message is kept per
//! thread and read with `pr_last_error`. Strings handed out by this library
//! are freed with `pr_string_free`; handles with their own `_free`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use paper_review::config::Config;
use paper_review::corpus::{load_corpus, Corpus};
use paper_review::evaluation::{mean_score, overlap_similarity};
use paper_review::pipeline::partition::partition;
use paper_review::pipeline::{plan_run, run_pipeline, Deps, RunOptions};
use paper_review::prompts::{parse_review_reply, ExpectedPaper, PromptError};
use rust_decimal::Decimal;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrStatus {
    PrOk = 0,
    PrNullArgument = 1,
    PrInvalidUtf8 = 2,
    PrInvalidArgument = 3,
    PrConfigError = 4,
    PrCorpusError = 5,
    PrRunError = 6,
    PrReplyError = 7,
    PrScoreOutOfRange = 8,
    PrPanic = 99,
}

/// A loaded corpus.
pub struct PrCorpus {
    corpus: Corpus,
}

/// A validated configuration with its backend and limiter.
pub struct PrEngine {
    config: Config,
    deps: Deps,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PrStatus, String);

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PrStatus::PrOk
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PrStatus::PrPanic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PrStatus::PrNullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PrStatus::PrInvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(PrStatus::PrNullArgument, format!("{what} is null")))
}

fn to_c(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(PrStatus::PrInvalidArgument, "result contains a nul byte".into()))
}

fn id_set(json: &str, what: &str) -> Result<BTreeSet<String>, Failure> {
    serde_json::from_str(json).map_err(|e| Failure(PrStatus::PrInvalidArgument, format!("{what}: {e}")))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `root` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_corpus_open(root: *const c_char, out: *mut *mut PrCorpus) -> PrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let root = text(root, "root")?;
        let corpus = load_corpus(&PathBuf::from(root)).map_err(|e| Failure(PrStatus::PrCorpusError, e.to_string()))?;
        *out = Box::into_raw(Box::new(PrCorpus { corpus }));
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_corpus_len(corpus: *const PrCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.corpus.len())
}

/// # Safety
/// `corpus` must be null or a handle from `pr_corpus_open`, freed once.
#[no_mangle]
pub unsafe extern "C" fn pr_corpus_free(corpus: *mut PrCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads and validates a TOML config and builds its backend.
///
/// # Safety
/// `config_path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_engine_new(config_path: *const c_char, out: *mut *mut PrEngine) -> PrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = text(config_path, "config_path")?;
        let cfg_err = |e: paper_review::config::ConfigError| Failure(PrStatus::PrConfigError, e.to_string());
        let config = Config::load(&PathBuf::from(path)).map_err(cfg_err)?;
        config.validate().map_err(cfg_err)?;
        let deps = Deps::from_config(&config).map_err(cfg_err)?;
        *out = Box::into_raw(Box::new(PrEngine { config, deps }));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from `pr_engine_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn pr_engine_free(engine: *mut PrEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Batch plan as JSON, without contacting the backend.
///
/// # Safety
/// Handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_engine_plan(engine: *const PrEngine, corpus: *const PrCorpus, out_json: *mut *mut c_char) -> PrStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        let engine = engine.as_ref().ok_or_else(|| Failure(PrStatus::PrNullArgument, "engine is null".into()))?;
        let corpus = corpus.as_ref().ok_or_else(|| Failure(PrStatus::PrNullArgument, "corpus is null".into()))?;
        let plan = plan_run(&corpus.corpus, &engine.config).map_err(|e| Failure(PrStatus::PrRunError, e.to_string()))?;
        *out = to_c(serde_json::to_string(&plan).expect("plan serializes"))?;
        Ok(())
    })
}

/// Runs (or with `resume` nonzero, resumes) a review and returns the
/// canonical decision JSON.
///
/// # Safety
/// Handles must be live; strings nul-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn pr_engine_run(
    engine: *const PrEngine,
    corpus: *const PrCorpus,
    runs_dir: *const c_char,
    run_id: *const c_char,
    resume: i32,
    out_json: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        let engine = engine.as_ref().ok_or_else(|| Failure(PrStatus::PrNullArgument, "engine is null".into()))?;
        let corpus = corpus.as_ref().ok_or_else(|| Failure(PrStatus::PrNullArgument, "corpus is null".into()))?;
        let mut opts = RunOptions::new(text(run_id, "run_id")?, text(runs_dir, "runs_dir")?);
        opts.resume = resume != 0;
        let decision = run_pipeline(&corpus.corpus, &engine.config, &engine.deps, &opts)
            .map_err(|e| Failure(PrStatus::PrRunError, e.to_string()))?;
        *out = to_c(decision.to_canonical_json())?;
        Ok(())
    })
}

/// Seeded partition of the ids in `ids_json` (a JSON string array) into
/// review batches, returned as a JSON array of batch assignments.
///
/// # Safety
/// `ids_json` must be nul-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn pr_partition_plan(
    ids_json: *const c_char,
    batch_size: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        let ids: Vec<String> = serde_json::from_str(text(ids_json, "ids_json")?)
            .map_err(|e| Failure(PrStatus::PrInvalidArgument, format!("ids_json: {e}")))?;
        if batch_size < 2 {
            return Err(Failure(PrStatus::PrInvalidArgument, "batch_size must be at least 2".into()));
        }
        *out = to_c(serde_json::to_string(&partition(&ids, batch_size, seed)).expect("plan serializes"))?;
        Ok(())
    })
}

/// Exact mean of scores given in hundredths, as a decimal string
/// (`8580` and `8600` give `"85.9"`).
///
/// # Safety
/// `hundredths` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_mean_score(hundredths: *const u32, len: usize, out: *mut *mut c_char) -> PrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if hundredths.is_null() {
            return Err(Failure(PrStatus::PrNullArgument, "hundredths is null".into()));
        }
        let values: Vec<Decimal> = std::slice::from_raw_parts(hundredths, len)
            .iter()
            .map(|&h| Decimal::new(h as i64, 2))
            .collect();
        let mean = mean_score(&values).map_err(|e| Failure(PrStatus::PrInvalidArgument, e.to_string()))?;
        *out = to_c(mean.to_string())?;
        Ok(())
    })
}

/// `|selected ∩ reference|` and `|reference|` for two JSON id arrays.
///
/// # Safety
/// Strings must be nul-terminated; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn pr_overlap_similarity(
    selected_json: *const c_char,
    reference_json: *const c_char,
    out_hits: *mut usize,
    out_total: *mut usize,
) -> PrStatus {
    guard(|| {
        let hits = out_ptr(out_hits, "out_hits")?;
        let total = out_ptr(out_total, "out_total")?;
        let selected = id_set(text(selected_json, "selected_json")?, "selected_json")?;
        let reference = id_set(text(reference_json, "reference_json")?, "reference_json")?;
        let s = overlap_similarity(&selected, &reference).map_err(|e| Failure(PrStatus::PrInvalidArgument, e.to_string()))?;
        *hits = s.hits;
        *total = s.total;
        Ok(())
    })
}

/// Parses a reviewer reply. `expected_json` is an array of
/// `{"paper_id", "title"}`; the result is a JSON array of outcomes.
///
/// # Safety
/// Strings must be nul-terminated; `criterion_ids` must point to `n_ids`
/// bytes; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn pr_parse_review_reply(
    reply: *const c_char,
    expected_json: *const c_char,
    criterion_ids: *const u8,
    n_ids: usize,
    out_json: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        let reply = text(reply, "reply")?;
        let expected: Vec<serde_json::Value> = serde_json::from_str(text(expected_json, "expected_json")?)
            .map_err(|e| Failure(PrStatus::PrInvalidArgument, format!("expected_json: {e}")))?;
        let expected: Vec<ExpectedPaper> = expected
            .iter()
            .map(|v| match (v["paper_id"].as_str(), v["title"].as_str()) {
                (Some(id), Some(title)) => Ok(ExpectedPaper::new(id, title)),
                _ => Err(Failure(PrStatus::PrInvalidArgument, "expected_json items need paper_id and title".into())),
            })
            .collect::<Result<_, _>>()?;
        let ids = if n_ids == 0 {
            &[][..]
        } else if criterion_ids.is_null() {
            return Err(Failure(PrStatus::PrNullArgument, "criterion_ids is null".into()));
        } else {
            std::slice::from_raw_parts(criterion_ids, n_ids)
        };
        let outcomes = parse_review_reply(reply, &expected, ids).map_err(|e| match e {
            PromptError::ScoreOutOfRange { .. } => Failure(PrStatus::PrScoreOutOfRange, e.to_string()),
            other => Failure(PrStatus::PrReplyError, other.to_string()),
        })?;
        *out = to_c(serde_json::to_string(&outcomes).expect("outcomes serialize"))?;
        Ok(())
    })
}
