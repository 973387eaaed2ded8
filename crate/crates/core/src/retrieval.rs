//! Paper-scoped chunking, embedding, and exact cosine retrieval.
//!
//! Every entry lives in a bucket keyed by its paper id and a query is only
//! ever scored against a single bucket, so retrieval for one paper cannot
//! surface text from another.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{PaperRecord, SectionKind, SectionMap};

pub const DEFAULT_CHUNK_SIZE: usize = 1600;
pub const DEFAULT_OVERLAP: usize = 200;
pub const DEFAULT_TOP_K: usize = 6;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid chunk parameters: chunk_size {chunk_size}, overlap {overlap}")]
    InvalidChunkParams { chunk_size: usize, overlap: usize },
    #[error("embedder dimension {embedder} does not match index dimension {index}")]
    DimensionMismatch { index: usize, embedder: usize },
    #[error("paper {0} is not indexed")]
    UnknownPaper(String),
    #[error("k must be positive")]
    InvalidK,
    #[error("embedding service error: {0}")]
    Embedding(String),
    #[error("index dump error: {0}")]
    Dump(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub chunk_id: String,
    pub paper_id: String,
    pub section_kind: SectionKind,
    pub text: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub entry: ChunkEntry,
    pub score: f64,
}

/// Splits each section into character windows of `chunk_size` that overlap
/// by `overlap` characters. Windows never cross a section boundary and
/// empty sections yield nothing.
pub fn chunk_text(
    sections: &SectionMap,
    chunk_size: usize,
    overlap: usize,
) -> Result<Vec<(SectionKind, String)>, RetrievalError> {
    if chunk_size == 0 || overlap >= chunk_size {
        return Err(RetrievalError::InvalidChunkParams { chunk_size, overlap });
    }
    let step = chunk_size - overlap;
    let mut out = Vec::new();
    for section in sections.iter() {
        let chars: Vec<char> = section.text().chars().collect();
        if chars.is_empty() {
            continue;
        }
        let mut start = 0;
        loop {
            let end = (start + chunk_size).min(chars.len());
            out.push((section.kind, chars[start..end].iter().collect()));
            if start + chunk_size >= chars.len() {
                break;
            }
            start += step;
        }
    }
    Ok(out)
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;
}

const MOCK_EMBED_KEY: &[u8] = b"paper-review/mock-embed/v1\0";

/// Deterministic stand-in for an embedding service: a keyed SHA-256 of the
/// text seeds a ChaCha stream that is expanded to `dimension` values in
/// [-1, 1] and L2-normalized.
pub fn mock_embed(text: &str, dimension: usize) -> Vec<f64> {
    let dimension = dimension.max(1);
    let mut hasher = Sha256::new();
    hasher.update(MOCK_EMBED_KEY);
    hasher.update((dimension as u64).to_le_bytes());
    hasher.update(text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&hasher.finalize());
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut v: Vec<f64> = (0..dimension).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub dimension: usize,
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self { dimension }
    }
}

impl Embedder for MockEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        Ok(mock_embed(text, self.dimension))
    }
}

/// Embedding adapter for services speaking the common `/embeddings` shape:
/// `{"model", "input"}` in, `{"data": [{"embedding": [...]}]}` out.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>, dimension: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            dimension,
            agent,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let mut resp = req
            .send_json(&body)
            .map_err(|e| RetrievalError::Embedding(e.to_string()))?;
        let status = resp.status().as_u16();
        let json: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| RetrievalError::Embedding(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(RetrievalError::Embedding(format!("status {status}: {json}")));
        }
        let vector: Vec<f64> = json["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| RetrievalError::Embedding("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(0.0))
            .collect();
        if vector.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                index: self.dimension,
                embedder: vector.len(),
            });
        }
        Ok(vector)
    }
}

/// Cosine similarity; zero-norm inputs score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

type Bucket = Arc<RwLock<Vec<ChunkEntry>>>;

/// Exact-search vector index with one bucket per paper.
#[derive(Debug)]
pub struct IsolatedIndex {
    dimension: usize,
    buckets: RwLock<BTreeMap<String, Bucket>>,
}

impl IsolatedIndex {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension: dimension.max(1),
            buckets: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn paper_ids(&self) -> Vec<String> {
        self.buckets.read().unwrap().keys().cloned().collect()
    }

    pub fn entry_count(&self, paper_id: &str) -> Option<usize> {
        self.bucket(paper_id).map(|b| b.read().unwrap().len())
    }

    pub fn entries(&self, paper_id: &str) -> Option<Vec<ChunkEntry>> {
        self.bucket(paper_id).map(|b| b.read().unwrap().clone())
    }

    fn bucket(&self, paper_id: &str) -> Option<Bucket> {
        self.buckets.read().unwrap().get(paper_id).cloned()
    }

    /// Stores `entries` as the full contents of `paper_id`'s bucket.
    pub fn replace(&self, paper_id: &str, entries: Vec<ChunkEntry>) -> Result<(), RetrievalError> {
        if let Some(bad) = entries.iter().find(|e| e.vector.len() != self.dimension) {
            return Err(RetrievalError::DimensionMismatch {
                index: self.dimension,
                embedder: bad.vector.len(),
            });
        }
        debug_assert!(entries.iter().all(|e| e.paper_id == paper_id));
        let existing = self.bucket(paper_id);
        match existing {
            Some(bucket) => *bucket.write().unwrap() = entries,
            None => {
                let mut map = self.buckets.write().unwrap();
                let bucket = map.entry(paper_id.to_string()).or_default();
                *bucket.write().unwrap() = entries;
            }
        }
        Ok(())
    }

    /// Chunks, embeds, and stores a paper, replacing any earlier entries.
    pub fn index_paper(
        &self,
        paper: &PaperRecord,
        embedder: &dyn Embedder,
        chunk_size: usize,
        overlap: usize,
    ) -> Result<usize, RetrievalError> {
        if embedder.dimension() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                index: self.dimension,
                embedder: embedder.dimension(),
            });
        }
        let chunks = chunk_text(&paper.sections, chunk_size, overlap)?;
        let mut entries = Vec::with_capacity(chunks.len());
        for (i, (kind, text)) in chunks.into_iter().enumerate() {
            let vector = embedder.embed(&text)?;
            entries.push(ChunkEntry {
                chunk_id: format!("{}:{:05}", paper.paper_id, i),
                paper_id: paper.paper_id.clone(),
                section_kind: kind,
                text,
                vector,
            });
        }
        let n = entries.len();
        self.replace(&paper.paper_id, entries)?;
        Ok(n)
    }

    /// Top-`k` entries of one paper by cosine score, ties by chunk id.
    pub fn retrieve(
        &self,
        paper_id: &str,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<ScoredChunk>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let bucket = self
            .bucket(paper_id)
            .ok_or_else(|| RetrievalError::UnknownPaper(paper_id.to_string()))?;
        let qv = embedder.embed(query)?;
        if qv.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                index: self.dimension,
                embedder: qv.len(),
            });
        }
        let entries = bucket.read().unwrap();
        self.retrieve_vector(&entries, &qv, k)
    }

    fn retrieve_vector(&self, entries: &[ChunkEntry], qv: &[f64], k: usize) -> Result<Vec<ScoredChunk>, RetrievalError> {
        let mut scored: Vec<ScoredChunk> = entries
            .iter()
            .map(|e| ScoredChunk {
                score: cosine(qv, &e.vector),
                entry: e.clone(),
            })
            .collect();
        sort_scored(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    /// Writes every entry as one JSON line, buckets in paper-id order.
    pub fn dump_jsonl(&self, mut out: impl Write) -> Result<(), RetrievalError> {
        let map = self.buckets.read().unwrap();
        for bucket in map.values() {
            for entry in bucket.read().unwrap().iter() {
                let line = serde_json::to_string(entry).map_err(|e| RetrievalError::Dump(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| RetrievalError::Dump(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn load_jsonl(dimension: usize, input: impl BufRead) -> Result<Self, RetrievalError> {
        let mut grouped: BTreeMap<String, Vec<ChunkEntry>> = BTreeMap::new();
        for line in input.lines() {
            let line = line.map_err(|e| RetrievalError::Dump(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ChunkEntry = serde_json::from_str(&line).map_err(|e| RetrievalError::Dump(e.to_string()))?;
            grouped.entry(entry.paper_id.clone()).or_default().push(entry);
        }
        let index = Self::new(dimension);
        for (paper_id, entries) in grouped {
            index.replace(&paper_id, entries)?;
        }
        Ok(index)
    }
}

/// Score descending, then chunk id ascending.
pub fn sort_scored(scored: &mut [ScoredChunk]) {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.entry.chunk_id.cmp(&b.entry.chunk_id))
    });
}

/// Packs whole chunks in score order, each prefixed with
/// `[paper_id/section_kind]`, until the next chunk's text would push the
/// total chunk text past `budget` characters.
pub fn assemble_context(chunks: &[ScoredChunk], budget: usize) -> String {
    let mut ordered = chunks.to_vec();
    sort_scored(&mut ordered);
    let mut used = 0;
    let mut parts = Vec::new();
    for c in &ordered {
        let len = c.entry.text.chars().count();
        if used + len > budget {
            break;
        }
        used += len;
        parts.push(format!("[{}/{}]\n{}", c.entry.paper_id, c.entry.section_kind, c.entry.text));
    }
    parts.join("\n\n")
}
