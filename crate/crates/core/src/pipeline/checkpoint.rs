//! Append-only checkpoint and log streams for a run directory.
//!
//! Both files share one sequence counter. A record is durable once its
//! line has been written and synced.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::util::sha256_hex;

pub const CHECKPOINT_FILE: &str = "checkpoint.jsonl";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    FormatGate,
    BatchResult,
    ChairResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub run_id: String,
    pub sequence: u64,
    pub kind: RecordKind,
    /// JSON text of the record body; hashed as-is.
    pub payload: String,
    pub payload_hash: String,
    /// Run time elapsed when the record was written, summed over invocations.
    pub elapsed_ms: u64,
}

impl CheckpointRecord {
    pub fn decode<T: for<'de> Deserialize<'de>>(&self) -> Result<T, PipelineError> {
        serde_json::from_str(&self.payload)
            .map_err(|e| PipelineError::CheckpointCorrupt(format!("record {}: {e}", self.sequence)))
    }
}

#[derive(Debug, Serialize)]
struct LogLine<'a> {
    sequence: u64,
    run_id: &'a str,
    elapsed_ms: u64,
    event: &'a str,
    fields: Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writer for `checkpoint.jsonl` and `log.jsonl`. Owned by one thread.
#[derive(Debug)]
pub struct Journal {
    run_id: String,
    checkpoint_path: PathBuf,
    log_path: PathBuf,
    checkpoint: File,
    log: File,
    next_sequence: u64,
}

impl Journal {
    /// Opens (creating if needed) the streams in `run_dir`, continuing the
    /// sequence after `last_sequence`.
    pub fn open(run_dir: &Path, run_id: &str, last_sequence: Option<u64>) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let checkpoint_path = run_dir.join(CHECKPOINT_FILE);
        let log_path = run_dir.join(LOG_FILE);
        let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p).map_err(io_err(p));
        let checkpoint = open(&checkpoint_path)?;
        let log = open(&log_path)?;
        Ok(Self {
            run_id: run_id.to_string(),
            checkpoint_path,
            log_path,
            checkpoint,
            log,
            next_sequence: last_sequence.map_or(0, |s| s + 1),
        })
    }

    fn take_sequence(&mut self) -> u64 {
        let s = self.next_sequence;
        self.next_sequence += 1;
        s
    }

    pub fn append<T: Serialize>(&mut self, kind: RecordKind, payload: &T, elapsed_ms: u64) -> Result<u64, PipelineError> {
        let payload = serde_json::to_string(payload).expect("checkpoint payload serializes");
        let record = CheckpointRecord {
            run_id: self.run_id.clone(),
            sequence: self.take_sequence(),
            kind,
            payload_hash: sha256_hex(payload.as_bytes()),
            payload,
            elapsed_ms,
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let path = self.checkpoint_path.clone();
        self.checkpoint.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.checkpoint.flush().map_err(io_err(&path))?;
        self.checkpoint.sync_data().map_err(io_err(&path))?;
        Ok(record.sequence)
    }

    pub fn log(&mut self, event: &str, fields: Value, elapsed_ms: u64) -> Result<(), PipelineError> {
        let line = LogLine {
            sequence: self.take_sequence(),
            run_id: &self.run_id,
            elapsed_ms,
            event,
            fields,
        };
        let mut text = serde_json::to_string(&line).expect("log line serializes");
        text.push('\n');
        let path = self.log_path.clone();
        self.log.write_all(text.as_bytes()).map_err(io_err(&path))?;
        self.log.flush().map_err(io_err(&path))
    }
}

/// Lines of a JSONL file; a final line without a newline (a torn write) is
/// dropped.
fn complete_lines(path: &Path) -> Result<Vec<String>, PipelineError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
    }
    Ok(out)
}

/// Reads and verifies every record of a checkpoint file.
pub fn read_checkpoint(path: &Path, run_id: &str) -> Result<Vec<CheckpointRecord>, PipelineError> {
    let mut records: Vec<CheckpointRecord> = Vec::new();
    for (i, line) in complete_lines(path)?.iter().enumerate() {
        let rec: CheckpointRecord = serde_json::from_str(line)
            .map_err(|e| PipelineError::CheckpointCorrupt(format!("line {}: {e}", i + 1)))?;
        if rec.run_id != run_id {
            return Err(PipelineError::CheckpointCorrupt(format!(
                "line {} belongs to run {}",
                i + 1,
                rec.run_id
            )));
        }
        if sha256_hex(rec.payload.as_bytes()) != rec.payload_hash {
            return Err(PipelineError::ChecksumMismatch { sequence: rec.sequence });
        }
        if let Some(prev) = records.last() {
            if rec.sequence <= prev.sequence {
                return Err(PipelineError::CheckpointCorrupt(format!(
                    "sequence {} follows {}",
                    rec.sequence, prev.sequence
                )));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Highest sequence number in the log file, ignoring unreadable lines.
pub fn last_log_sequence(path: &Path) -> Result<Option<u64>, PipelineError> {
    Ok(complete_lines(path)?
        .iter()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter_map(|v| v["sequence"].as_u64())
        .max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn append_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = Journal::open(dir.path(), "r1", None).unwrap();
        j.log("start", json!({}), 0).unwrap();
        assert_eq!(j.append(RecordKind::BatchResult, &json!({"a": 1}), 5).unwrap(), 1);
        assert_eq!(j.append(RecordKind::ChairResult, &json!([1, 2]), 9).unwrap(), 2);
        let recs = read_checkpoint(&dir.path().join(CHECKPOINT_FILE), "r1").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].decode::<Vec<u32>>().unwrap(), vec![1, 2]);
        assert_eq!(last_log_sequence(&dir.path().join(LOG_FILE)).unwrap(), Some(0));

        let mut j = Journal::open(dir.path(), "r1", Some(2)).unwrap();
        assert_eq!(j.append(RecordKind::FormatGate, &json!(true), 10).unwrap(), 3);
    }

    #[test]
    fn torn_tail_is_ignored_and_tampering_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        let mut j = Journal::open(dir.path(), "r", None).unwrap();
        j.append(RecordKind::BatchResult, &json!({"x": 1}), 0).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"run_id\":\"r\",\"seq").unwrap();
        assert_eq!(read_checkpoint(&path, "r").unwrap().len(), 1);

        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap().replace("{\\\"x\\\":1}", "{\\\"x\\\":2}");
        std::fs::write(&path, format!("{first}\n")).unwrap();
        assert!(matches!(read_checkpoint(&path, "r"), Err(PipelineError::ChecksumMismatch { sequence: 0 })));
    }
}
