//! The run's final decision and its canonical serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::backend::Usage;
use crate::prompts::{Role, Score};

pub const DECISION_FILE: &str = "decision.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperVerdict {
    pub score: Score,
    pub comments: String,
    /// Which stage produced the latest assessment.
    pub stage: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub batch_id: usize,
    pub reviewer_label: String,
    pub paper_ids: Vec<String>,
    pub advanced_ids: Vec<String>,
    pub usage: Usage,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairSummary {
    pub round: usize,
    pub index: usize,
    pub final_ranking: bool,
    pub paper_ids: Vec<String>,
    pub kept_ids: Vec<String>,
    pub usage: Usage,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub wall_time_ms: u64,
    pub usage: Usage,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost_usd: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalDecision {
    pub run_id: String,
    pub gate_passed_ids: BTreeSet<String>,
    pub first_round_ids: BTreeSet<String>,
    pub accepted_ids: BTreeSet<String>,
    pub per_paper: BTreeMap<String, PaperVerdict>,
    pub batches: Vec<BatchSummary>,
    pub chair: Vec<ChairSummary>,
    pub totals: Totals,
}

impl FinalDecision {
    /// Pretty JSON with sorted sets and maps and a trailing newline; equal
    /// decisions give equal bytes.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("decision serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_canonical_json()).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::CheckpointCorrupt(format!("{}: {e}", path.display())))
    }

    /// Every usage recorded in the decision, for cost accounting.
    pub fn usages(&self) -> Vec<Usage> {
        vec![self.totals.usage]
    }
}
