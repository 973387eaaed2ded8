#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use paper_review::backend::mock::MockBackend;
use paper_review::backend::{Clock, VirtualClock};
use paper_review::config::Config;
use paper_review::corpus::{load_corpus, synthetic, write_corpus, Corpus};
use paper_review::pipeline::Deps;
use serde_json::json;

/// Scores for the 12-paper corpus. With seed 7 the batches are
/// [p000 p011 p005] [p002 p009 p001] [p006 p010 p003] [p004 p008 p007],
/// so each batch holds exactly one of the four favored papers.
pub const SCORES: [(usize, f64); 12] = [
    (0, 70.0),
    (1, 55.0),
    (2, 75.0),
    (3, 91.0),
    (4, 68.0),
    (5, 60.0),
    (6, 65.0),
    (7, 89.0),
    (8, 50.0),
    (9, 93.0),
    (10, 70.0),
    (11, 95.0),
];

pub const FAVORED: [&str; 4] = ["p003", "p007", "p009", "p011"];
pub const FIRST_ROUND: [&str; 8] = ["p000", "p002", "p003", "p004", "p007", "p009", "p010", "p011"];

pub fn review_script() -> serde_json::Value {
    let scores: serde_json::Map<String, serde_json::Value> =
        SCORES.iter().map(|&(i, s)| (synthetic::title(i), json!(s))).collect();
    json!({ "reviews": { "scores": scores } })
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub corpus_root: PathBuf,
    pub config_path: PathBuf,
    pub script_path: PathBuf,
    pub runs_dir: PathBuf,
}

pub fn config_toml(concurrency: usize) -> String {
    format!(
        r#"[corpus]
root = "corpus"

[batching]
batch_size = 3
seed = 7
chair_batch_size = 10

[quotas]
final_quota = 4

[retrieval]
chunk_size = 400
overlap = 50
k = 3
dimension = 64
context_budget = 2000

[backend]
kind = "mock"
script = "mock.json"

[pricing]
usd_per_1k_input_tokens = "0.0025"
usd_per_1k_output_tokens = "0.0100"

[limits]
capacity = 64
refill_rate = 100.0
max_concurrency = {concurrency}
max_attempts = 3
base_backoff_ms = 100
backoff_multiplier = 2.0
"#
    )
}

impl Fixture {
    pub fn new(papers: usize, concurrency: usize, script: &serde_json::Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus_root = dir.path().join("corpus");
        write_corpus(&corpus_root, &format!("synthetic-{papers}"), &synthetic::sources(papers)).unwrap();
        let config_path = dir.path().join("config.toml");
        std::fs::write(&config_path, config_toml(concurrency)).unwrap();
        let script_path = dir.path().join("mock.json");
        std::fs::write(&script_path, serde_json::to_string_pretty(script).unwrap()).unwrap();
        let runs_dir = dir.path().join("runs");
        Self {
            dir,
            corpus_root,
            config_path,
            script_path,
            runs_dir,
        }
    }

    pub fn twelve(concurrency: usize) -> Self {
        Self::new(12, concurrency, &review_script())
    }

    pub fn config(&self) -> Config {
        Config::load(&self.config_path).unwrap()
    }

    pub fn corpus(&self) -> Corpus {
        load_corpus(&self.corpus_root).unwrap()
    }

    pub fn mock(&self) -> Arc<MockBackend> {
        Arc::new(MockBackend::from_file(&self.script_path).unwrap())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

pub fn deps(config: &Config, mock: &Arc<MockBackend>) -> Deps {
    let clock: Arc<dyn Clock> = Arc::new(VirtualClock::new());
    let deps = Deps::new(config, mock.clone(), clock).unwrap();
    mock.set_permit_probe(deps.caller.limiter.clone());
    deps
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}
