mod common;

use std::collections::BTreeSet;

use common::{deps, Fixture, FAVORED, FIRST_ROUND};
use paper_review::backend::mock::MockBackend;
use paper_review::config::FormatMode;
use paper_review::corpus::{synthetic, write_corpus, PaperSource};
use paper_review::pipeline::checkpoint::CHECKPOINT_FILE;
use paper_review::pipeline::decision::DECISION_FILE;
use paper_review::pipeline::partition::BatchAssignment;
use paper_review::pipeline::{review_batch, run_pipeline, PipelineError, ReviewEnv, RunOptions};
use paper_review::prompts::Role;
use paper_review::retrieval::IsolatedIndex;
use serde_json::json;
use std::sync::Arc;

fn ids(v: &[&str]) -> BTreeSet<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn twelve_papers_accept_the_favored_four() {
    let fx = Fixture::twelve(4);
    let config = fx.config();
    let mock = fx.mock();
    let d = deps(&config, &mock);
    let decision = run_pipeline(&fx.corpus(), &config, &d, &RunOptions::new("r1", &fx.runs_dir)).unwrap();
    assert_eq!(decision.accepted_ids, ids(&FAVORED));
    assert_eq!(decision.first_round_ids, ids(&FIRST_ROUND));
    assert_eq!(decision.gate_passed_ids.len(), 12);
    assert_eq!(decision.batches.len(), 4);
    assert_eq!(decision.chair.len(), 1);
    assert_eq!(decision.chair[0].paper_ids.len(), 8);
    assert_eq!(mock.call_count(), 5);
    assert_eq!(mock.unpermitted_calls(), 0);
    assert!(decision.totals.usage.input_tokens > 0);
    let on_disk = common::read(&fx.runs_dir.join("r1").join(DECISION_FILE));
    assert_eq!(on_disk, decision.to_canonical_json());
    let log = common::read(&fx.runs_dir.join("r1").join("log.jsonl"));
    let seqs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["sequence"].as_u64().unwrap())
        .collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn decision_independent_of_concurrency() {
    let mut seen = Vec::new();
    for c in [1, 4, 16] {
        let fx = Fixture::twelve(c);
        let config = fx.config();
        let mock = fx.mock();
        let d = deps(&config, &mock);
        let decision = run_pipeline(&fx.corpus(), &config, &d, &RunOptions::new("same", &fx.runs_dir)).unwrap();
        seen.push(decision.to_canonical_json());
        assert!(mock.peak_concurrency() <= c);
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn resume_after_each_interruption_point() {
    let reference = {
        let fx = Fixture::twelve(2);
        let config = fx.config();
        let mock = fx.mock();
        run_pipeline(&fx.corpus(), &config, &deps(&config, &mock), &RunOptions::new("r", &fx.runs_dir))
            .unwrap()
            .to_canonical_json()
    };
    for k in 0..4 {
        let fx = Fixture::twelve(2);
        let config = fx.config();
        let corpus = fx.corpus();
        let mut opts = RunOptions::new("r", &fx.runs_dir);
        opts.halt_after_batches = Some(k);
        let first = fx.mock();
        let err = run_pipeline(&corpus, &config, &deps(&config, &first), &opts).unwrap_err();
        assert!(matches!(err, PipelineError::Interrupted { checkpointed } if checkpointed == k));

        let second = fx.mock();
        let mut opts = RunOptions::new("r", &fx.runs_dir);
        opts.resume = true;
        let decision = run_pipeline(&corpus, &config, &deps(&config, &second), &opts).unwrap();
        assert_eq!(decision.to_canonical_json(), reference, "k = {k}");
        assert_eq!(second.call_count(), 5 - k, "k = {k}");
    }
}

#[test]
fn resume_unknown_run() {
    let fx = Fixture::twelve(1);
    let config = fx.config();
    let mut opts = RunOptions::new("nope", &fx.runs_dir);
    opts.resume = true;
    let err = run_pipeline(&fx.corpus(), &config, &deps(&config, &fx.mock()), &opts).unwrap_err();
    assert!(matches!(err, PipelineError::ResumeRunNotFound(id) if id == "nope"));
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let fx = Fixture::twelve(1);
    let config = fx.config();
    let corpus = fx.corpus();
    let mut opts = RunOptions::new("t", &fx.runs_dir);
    opts.halt_after_batches = Some(2);
    let _ = run_pipeline(&corpus, &config, &deps(&config, &fx.mock()), &opts);
    let path = fx.runs_dir.join("t").join(CHECKPOINT_FILE);
    let text = common::read(&path).replace("Review of", "Rewiew of");
    std::fs::write(&path, text).unwrap();
    let mut opts = RunOptions::new("t", &fx.runs_dir);
    opts.resume = true;
    let err = run_pipeline(&corpus, &config, &deps(&config, &fx.mock()), &opts).unwrap_err();
    assert!(matches!(err, PipelineError::ChecksumMismatch { .. }), "{err}");
}

#[test]
fn fresh_run_refuses_existing_checkpoints() {
    let fx = Fixture::twelve(1);
    let config = fx.config();
    let corpus = fx.corpus();
    run_pipeline(&corpus, &config, &deps(&config, &fx.mock()), &RunOptions::new("x", &fx.runs_dir)).unwrap();
    let err = run_pipeline(&corpus, &config, &deps(&config, &fx.mock()), &RunOptions::new("x", &fx.runs_dir)).unwrap_err();
    assert!(matches!(err, PipelineError::RunExists(_)));
}

#[test]
fn all_papers_failing_the_gate() {
    let fx = Fixture::twelve(2);
    let mut config = fx.config();
    config.corpus.min_body_chars = 1_000_000;
    let mock = fx.mock();
    let decision = run_pipeline(&fx.corpus(), &config, &deps(&config, &mock), &RunOptions::new("g", &fx.runs_dir)).unwrap();
    assert!(decision.gate_passed_ids.is_empty());
    assert!(decision.accepted_ids.is_empty());
    assert!(decision.first_round_ids.is_empty());
    assert_eq!(mock.call_count(), 0);
}

#[test]
fn multimodal_gate_uses_backend() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    let sources: Vec<PaperSource> = synthetic::sources(4)
        .into_iter()
        .map(|mut s| {
            s.image = Some(vec![0xFF, 0xD8, 0xFF]);
            s
        })
        .collect();
    write_corpus(&root, "mm", &sources).unwrap();
    let corpus = paper_review::corpus::load_corpus(&root).unwrap();
    let script = json!({
        "rules": [
            {"regex": "p001\\.jpg", "reply": "NO"},
            {"contains": "reply YES or NO", "reply": "YES, it matches."}
        ],
        "reviews": {"default_score": 70}
    });
    let script_path = dir.path().join("mock.json");
    std::fs::write(&script_path, script.to_string()).unwrap();
    let mut config = common::Fixture::twelve(1).config();
    config.corpus.format_mode = FormatMode::Multimodal;
    config.backend.script = Some(script_path.clone());
    let mock = Arc::new(MockBackend::from_file(&script_path).unwrap());
    let decision = run_pipeline(&corpus, &config, &deps(&config, &mock), &RunOptions::new("m", dir.path().join("runs"))).unwrap();
    assert_eq!(decision.gate_passed_ids, ids(&["p000", "p002", "p003"]));
    assert_eq!(mock.calls().iter().filter(|c| c.tag.starts_with("format-")).count(), 4);
}

#[test]
fn ambiguous_gate_reply_fails_the_run() {
    let fx = Fixture::new(3, 1, &json!({"default": "Maybe"}));
    let mut config = fx.config();
    config.corpus.format_mode = FormatMode::Multimodal;
    let corpus = {
        let c = fx.corpus();
        let recs = c.papers().iter().map(|p| p.clone().with_image("first.jpg")).collect();
        paper_review::corpus::Corpus::from_records("c", recs).unwrap()
    };
    let mock = fx.mock();
    let err = run_pipeline(&corpus, &config, &deps(&config, &mock), &RunOptions::new("a", &fx.runs_dir)).unwrap_err();
    assert!(matches!(err, PipelineError::AmbiguousReply(ref t) if t == "Maybe"), "{err}");
    // One re-ask of the same prompt, then give up.
    assert_eq!(mock.call_count(), 2);
}

fn batch_env_fixture(script: serde_json::Value) -> (Fixture, paper_review::config::Config, Arc<MockBackend>) {
    let fx = Fixture::new(3, 1, &script);
    let config = fx.config();
    let mock = fx.mock();
    (fx, config, mock)
}

#[test]
fn review_batch_tie_break_and_retry() {
    let titles: Vec<String> = (0..3).map(synthetic::title).collect();
    let good = paper_review::backend::mock::scripted_review_reply(
        &[
            (titles[2].clone(), serde_json::from_str("91.00").unwrap()),
            (titles[1].clone(), serde_json::from_str("85.50").unwrap()),
            (titles[0].clone(), serde_json::from_str("85.5").unwrap()),
        ],
        8,
    );
    let (fx, config, mock) = batch_env_fixture(json!({"default": {"sequence": ["not json", good]}}));
    let corpus = fx.corpus();
    let d = deps(&config, &mock);
    let index = IsolatedIndex::new(64);
    for p in corpus.papers() {
        index.index_paper(p, d.embedder.as_ref(), 400, 50).unwrap();
    }
    let env = ReviewEnv {
        corpus: &corpus,
        index: &index,
        deps: &d,
        config: &config,
        prior: None,
    };
    let a = BatchAssignment {
        batch_id: 0,
        reviewer_label: "reviewer-0".into(),
        paper_ids: vec!["p000".into(), "p001".into(), "p002".into()],
        advance_quota: 2,
    };
    let r = review_batch(&a, Role::Reviewer, &env).unwrap();
    assert_eq!(r.advanced_ids, vec!["p002".to_string(), "p000".to_string()]);
    assert_eq!(r.attempts, 2);
    assert_eq!(mock.call_count(), 2);
    let calls = mock.calls();
    assert_eq!(calls[0].prompt_sha256, calls[1].prompt_sha256);
}

#[test]
fn failed_batch_is_reassigned_once() {
    // Every reply to the first batch prompt is broken twice, then fine.
    let mut script = common::review_script();
    script["rules"] = json!([{ "contains": "Drone Swarm Coordination Study 011'", "reply": {"sequence": ["x", "x", {"score": 99}]} }]);
    let fx = Fixture::new(12, 1, &script);
    let config = fx.config();
    let mock = fx.mock();
    let decision = run_pipeline(&fx.corpus(), &config, &deps(&config, &mock), &RunOptions::new("f", &fx.runs_dir)).unwrap();
    let b0 = decision.batches.iter().find(|b| b.paper_ids.contains(&"p011".to_string())).unwrap();
    assert_eq!(b0.reviewer_label, "reviewer-0-reassigned-1");
    let log = common::read(&fx.runs_dir.join("f").join("log.jsonl"));
    assert!(log.contains("batch_reassigned"));
}

#[test]
fn second_failure_aborts() {
    let mut script = common::review_script();
    script["rules"] = json!([{ "contains": "Drone Swarm Coordination Study 011'", "reply": "x" }]);
    let fx = Fixture::new(12, 1, &script);
    let config = fx.config();
    let err = run_pipeline(&fx.corpus(), &config, &deps(&config, &fx.mock()), &RunOptions::new("f", &fx.runs_dir)).unwrap_err();
    assert!(matches!(err, PipelineError::BatchFailed { ref reviewer_label, .. } if reviewer_label == "reviewer-0-reassigned-1"), "{err}");
}
