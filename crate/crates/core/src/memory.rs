//! Embedding port, the historical question/query store, and blended
//! similarity-plus-structure retrieval used to pick few-shot examples.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("signatures of different kinds cannot be compared")]
    KindMismatch,
    #[error("storage error: {0}")]
    Storage(String),
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError>;
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag-of-words embedding: token counts hashed into `dim` buckets, then
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            v[(fnv1a64(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        Ok(v)
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, MemoryError> {
    if u.len() != v.len() {
        return Err(MemoryError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MemoryError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Sql,
    Cypher,
}

impl std::fmt::Display for QueryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QueryKind::Sql => "sql",
            QueryKind::Cypher => "cypher",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StructSignature {
    Sql {
        tables: BTreeSet<String>,
        columns: BTreeSet<String>,
    },
    Cypher {
        labels: BTreeSet<String>,
        rel_types: BTreeSet<String>,
    },
}

impl StructSignature {
    pub fn kind(&self) -> QueryKind {
        match self {
            StructSignature::Sql { .. } => QueryKind::Sql,
            StructSignature::Cypher { .. } => QueryKind::Cypher,
        }
    }

    pub fn empty(kind: QueryKind) -> Self {
        match kind {
            QueryKind::Sql => StructSignature::Sql {
                tables: BTreeSet::new(),
                columns: BTreeSet::new(),
            },
            QueryKind::Cypher => StructSignature::Cypher {
                labels: BTreeSet::new(),
                rel_types: BTreeSet::new(),
            },
        }
    }

    /// All names as one set; the two halves are tagged so a table and a
    /// column with the same spelling stay distinct.
    fn names(&self) -> BTreeSet<String> {
        let (a, b, ta, tb) = match self {
            StructSignature::Sql { tables, columns } => (tables, columns, "t:", "c:"),
            StructSignature::Cypher { labels, rel_types } => (labels, rel_types, "l:", "r:"),
        };
        a.iter()
            .map(|x| format!("{ta}{}", x.to_lowercase()))
            .chain(b.iter().map(|x| format!("{tb}{}", x.to_lowercase())))
            .collect()
    }
}

/// Jaccard similarity of the two signatures' name sets; 0 when both are empty.
pub fn structural_score(a: &StructSignature, b: &StructSignature) -> Result<f64, MemoryError> {
    if a.kind() != b.kind() {
        return Err(MemoryError::KindMismatch);
    }
    let (na, nb) = (a.names(), b.names());
    let union = na.union(&nb).count();
    if union == 0 {
        return Ok(0.0);
    }
    Ok(na.intersection(&nb).count() as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: u64,
    pub question: String,
    pub query_text: String,
    pub query_kind: QueryKind,
    pub result_summary: String,
    pub embedding: Vec<f64>,
    pub signature: StructSignature,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub record: QaRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySettings {
    pub dim: usize,
    pub alpha: f64,
    pub k: usize,
}

impl Default for MemorySettings {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
        }
    }
}

/// Append-only record store. Reads may run concurrently; writes are
/// serialized and become visible atomically.
#[derive(Debug)]
pub struct QaMemory {
    settings: MemorySettings,
    records: RwLock<Vec<QaRecord>>,
    log: Option<Mutex<(PathBuf, File)>>,
}

impl QaMemory {
    pub fn in_memory(settings: MemorySettings) -> Self {
        Self {
            settings,
            records: RwLock::new(Vec::new()),
            log: None,
        }
    }

    /// Opens (or creates) a JSON-lines log and rebuilds the index from it.
    pub fn open(path: &Path, settings: MemorySettings) -> Result<Self, MemoryError> {
        let storage = |e: std::io::Error| MemoryError::Storage(format!("{}: {e}", path.display()));
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(storage)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(storage)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: QaRecord = serde_json::from_str(&line)
                    .map_err(|e| MemoryError::Storage(format!("{} line {}: {e}", path.display(), n + 1)))?;
                records.push(rec);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(storage)?;
        Ok(Self {
            settings,
            records: RwLock::new(records),
            log: Some(Mutex::new((path.to_path_buf(), file))),
        })
    }

    pub fn settings(&self) -> MemorySettings {
        self.settings
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Vec<QaRecord>> {
        self.records.read().unwrap_or_else(|p| p.into_inner())
    }

    /// Stores a record. The `id` field is assigned here and returned.
    pub fn record_qa(&self, mut record: QaRecord) -> Result<u64, MemoryError> {
        if record.embedding.len() != self.settings.dim {
            return Err(MemoryError::DimensionMismatch(
                record.embedding.len(),
                self.settings.dim,
            ));
        }
        if record.signature.kind() != record.query_kind {
            return Err(MemoryError::KindMismatch);
        }
        let mut records = self.records.write().unwrap_or_else(|p| p.into_inner());
        record.id = records.last().map_or(1, |r| r.id + 1);
        if let Some(log) = &self.log {
            let mut guard = log.lock().unwrap_or_else(|p| p.into_inner());
            let (path, file) = &mut *guard;
            let line = serde_json::to_string(&record).map_err(|e| MemoryError::Storage(e.to_string()))?;
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| MemoryError::Storage(format!("{}: {e}", path.display())))?;
        }
        let id = record.id;
        records.push(record);
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Option<QaRecord> {
        self.read().iter().find(|r| r.id == id).cloned()
    }

    pub fn records(&self) -> Vec<QaRecord> {
        self.read().clone()
    }

    /// Top-`k` records of `kind` by α·cosine + (1−α)·structural score,
    /// descending, ties broken towards the more recent record.
    pub fn retrieve_similar(
        &self,
        embedder: &dyn Embedder,
        question: &str,
        kind: QueryKind,
        k: usize,
        sig: Option<&StructSignature>,
    ) -> Vec<Scored> {
        let q = embedder.embed(question).ok();
        let alpha = self.settings.alpha;
        let records = self.read();
        let mut scored: Vec<Scored> = records
            .iter()
            .filter(|r| r.query_kind == kind)
            .map(|r| {
                let cos = q
                    .as_deref()
                    .and_then(|q| cosine_similarity(q, &r.embedding).ok())
                    .unwrap_or(0.0);
                let st = sig.and_then(|s| structural_score(s, &r.signature).ok()).unwrap_or(0.0);
                Scored {
                    score: alpha * cos + (1.0 - alpha) * st,
                    record: r.clone(),
                }
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| b.record.id.cmp(&a.record.id)));
        scored.truncate(k.max(1));
        scored
    }
}

/// Builds a record with the embedding computed from the question.
pub fn make_record(
    embedder: &dyn Embedder,
    question: &str,
    query_text: &str,
    signature: StructSignature,
    result_summary: &str,
    created_at: &str,
) -> Result<QaRecord, MemoryError> {
    Ok(QaRecord {
        id: 0,
        question: question.to_string(),
        query_text: query_text.to_string(),
        query_kind: signature.kind(),
        result_summary: result_summary.to_string(),
        embedding: embedder.embed(question)?,
        signature,
        created_at: created_at.to_string(),
    })
}
