//! Labeled single-turn exemplar store with exact top-1 cosine retrieval.
//!
//! The store loads from JSONL (`{id?, text, label}` per line) and keeps a
//! binary sidecar cache next to the file so re-ingestion skips the embedder.
//! Retrieval is an exhaustive scan: stores stay small (≤ 10⁴ entries) and
//! exactness is what makes the retrieval step testable against an oracle.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::{fnv1a64, Embedder};
use crate::error::{Error, Result};
use crate::graph::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledQueryEntry {
    pub id: String,
    pub text: String,
    pub label: Label,
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoreLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    text: String,
    label: Label,
}

#[derive(Clone, Debug, Default)]
pub struct VectorStore {
    entries: Vec<LabeledQueryEntry>,
    dim: usize,
}

/// Sidecar cache layout: `[u32 dim][entry*]` where each entry is the FNV-1a
/// 64-bit hash of the text followed by dim little-endian f32 values.
fn cache_path(store_path: &Path) -> PathBuf {
    let mut name = store_path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".veccache");
    store_path.with_file_name(name)
}

fn read_cache(path: &Path, dim: usize) -> Option<std::collections::HashMap<u64, Vec<f32>>> {
    let bytes = fs::read(path).ok()?;
    if bytes.len() < 4 {
        return None;
    }
    let file_dim = u32::from_le_bytes(bytes[0..4].try_into().ok()?) as usize;
    if file_dim != dim {
        return None;
    }
    let entry_size = 8 + dim * 4;
    let body = &bytes[4..];
    if entry_size == 8 || body.len() % entry_size != 0 {
        return None;
    }
    let mut map = std::collections::HashMap::with_capacity(body.len() / entry_size);
    for chunk in body.chunks_exact(entry_size) {
        let hash = u64::from_le_bytes(chunk[0..8].try_into().ok()?);
        let mut vec = Vec::with_capacity(dim);
        for quad in chunk[8..].chunks_exact(4) {
            vec.push(f32::from_le_bytes(quad.try_into().ok()?));
        }
        if !plausible_unit(&vec) {
            return None;
        }
        map.insert(hash, vec);
    }
    Some(map)
}

fn plausible_unit(v: &[f32]) -> bool {
    let norm: f64 = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    v.iter().all(|x| x.is_finite()) && (norm == 0.0 || (norm - 1.0).abs() < 1e-3)
}

fn write_cache(path: &Path, dim: usize, entries: &[LabeledQueryEntry]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 + entries.len() * (8 + dim * 4));
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    for entry in entries {
        bytes.extend_from_slice(&fnv1a64(entry.text.as_bytes()).to_le_bytes());
        for x in &entry.embedding {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

impl VectorStore {
    pub fn empty(dim: usize) -> Self {
        VectorStore {
            entries: Vec::new(),
            dim,
        }
    }

    /// Builds a store from already-embedded entries, enforcing invariants.
    pub fn from_entries(entries: Vec<LabeledQueryEntry>, dim: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for entry in &entries {
            if entry.text.is_empty() {
                return Err(Error::InvalidInput(format!("entry {}: empty text", entry.id)));
            }
            if entry.embedding.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: entry.embedding.len(),
                });
            }
            if !seen.insert(entry.id.clone()) {
                return Err(Error::DuplicateStoreId(entry.id.clone()));
            }
        }
        Ok(VectorStore { entries, dim })
    }

    /// Loads a JSONL exemplar file, embedding texts not found in the sidecar
    /// cache. Any malformed or implausible cache is silently discarded and
    /// rebuilt; a cache can slow a load down, never corrupt it.
    pub fn ingest(path: &Path, embedder: &dyn Embedder) -> Result<Self> {
        let dim = embedder.dim();
        let raw = fs::read_to_string(path)?;
        let mut lines = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: StoreLine = serde_json::from_str(line).map_err(|e| Error::StoreLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            if parsed.text.trim().is_empty() {
                return Err(Error::StoreLine {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "empty text".into(),
                });
            }
            lines.push((lineno + 1, parsed));
        }

        let cache = read_cache(&cache_path(path), dim);
        let mut entries = Vec::with_capacity(lines.len());
        let mut cold_texts: Vec<String> = Vec::new();
        let mut cold_slots: Vec<usize> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in lines {
            let id = line.id.unwrap_or_else(|| format!("s{lineno}"));
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateStoreId(id));
            }
            let cached = cache
                .as_ref()
                .and_then(|c| c.get(&fnv1a64(line.text.as_bytes())))
                .cloned();
            let slot = entries.len();
            if cached.is_none() {
                cold_texts.push(line.text.clone());
                cold_slots.push(slot);
            }
            entries.push(LabeledQueryEntry {
                id,
                text: line.text,
                label: line.label,
                embedding: cached.unwrap_or_default(),
            });
        }

        let had_cold = !cold_texts.is_empty();
        if had_cold {
            let vectors = embedder.embed_batch(&cold_texts)?;
            for (slot, vector) in cold_slots.into_iter().zip(vectors) {
                if vector.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        got: vector.len(),
                    });
                }
                entries[slot].embedding = vector;
            }
        }
        if had_cold || cache.is_none() {
            // Best-effort rewrite; a read-only directory only loses caching.
            let _ = write_cache(&cache_path(path), dim, &entries);
        }
        VectorStore::from_entries(entries, dim)
    }

    /// Writes the store back as normalized JSONL plus a fresh sidecar cache.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for entry in &self.entries {
            let line = StoreLine {
                id: Some(entry.id.clone()),
                text: entry.text.clone(),
                label: entry.label,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        write_cache(&cache_path(path), self.dim, &self.entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[LabeledQueryEntry] {
        &self.entries
    }

    /// Exact top-1 cosine retrieval; ties break to the lowest entry index.
    /// Similarity is reported unclamped in [-1, 1].
    pub fn top1(&self, v: &[f64]) -> Result<(&LabeledQueryEntry, f64)> {
        if self.entries.is_empty() {
            return Err(Error::EmptyStore);
        }
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let (idx, sim) = self.scan(v);
        Ok((&self.entries[idx], sim))
    }

    #[cfg(feature = "parallel")]
    fn scan(&self, v: &[f64]) -> (usize, f64) {
        if self.entries.len() >= 512 {
            self.top1_par(v)
        } else {
            self.top1_seq(v)
        }
    }

    #[cfg(not(feature = "parallel"))]
    fn scan(&self, v: &[f64]) -> (usize, f64) {
        self.top1_seq(v)
    }

    /// Sequential scan. `better` is a strict order, so the first (lowest)
    /// index wins exact similarity ties.
    pub fn top1_seq(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0usize, cosine_mixed(v, &self.entries[0].embedding));
        for (idx, entry) in self.entries.iter().enumerate().skip(1) {
            let sim = cosine_mixed(v, &entry.embedding);
            if sim > best.1 {
                best = (idx, sim);
            }
        }
        (best.0, best.1)
    }

    /// Parallel scan; bitwise-identical to `top1_seq` because each similarity
    /// is computed by the same code and the reduction's tie-break prefers the
    /// lower index.
    #[cfg(feature = "parallel")]
    pub fn top1_par(&self, v: &[f64]) -> (usize, f64) {
        use rayon::prelude::*;
        self.entries
            .par_iter()
            .enumerate()
            .map(|(idx, entry)| (idx, cosine_mixed(v, &entry.embedding)))
            .reduce_with(|a, b| {
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    b
                } else {
                    a
                }
            })
            .expect("non-empty store")
    }
}

/// Cosine between an f64 query and an f32 stored vector, accumulated in f64.
/// Defined as 0 when either norm is 0.
pub(crate) fn cosine_mixed(a: &[f64], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let y = f64::from(*y);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}
