//! Text-to-vector embedders. Every embedder returns unit vectors (or the
//! all-zeros vector for empty text) of a fixed dimension, deterministically.
//!
//! Two implementations: a hashed bag-of-words stub that keeps the whole
//! pipeline runnable offline, and a client for a remote embedding service.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default vector dimension, mirroring common sentence encoders.
pub const DEFAULT_DIM: usize = 384;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f32>>;

    /// Batch embedding; order of outputs matches order of inputs.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic hashed bag-of-words embedder.
///
/// Tokens are maximal alphanumeric runs, lowercased. Each token hashes to a
/// coordinate (`hash mod D`) and a sign (+1 when bit 63 is clear), signs are
/// accumulated, and the result is L2-normalized. Empty token sets map to the
/// zero vector.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    dim: usize,
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be ≥ 1");
        StubEmbedder { dim }
    }
}

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder::new(DEFAULT_DIM)
    }
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut acc = vec![0.0f64; self.dim];
        let mut token = String::new();
        let flush = |token: &mut String, acc: &mut Vec<f64>| {
            if token.is_empty() {
                return;
            }
            let hash = fnv1a64(token.as_bytes());
            let idx = (hash % self.dim as u64) as usize;
            let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
            acc[idx] += sign;
            token.clear();
        };
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                for lower in ch.to_lowercase() {
                    token.push(lower);
                }
            } else {
                flush(&mut token, &mut acc);
            }
        }
        flush(&mut token, &mut acc);

        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; self.dim]);
        }
        Ok(acc.iter().map(|v| (v / norm) as f32).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub model: String,
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub vectors: Vec<Vec<f32>>,
}

/// Counting semaphore bounding in-flight remote requests.
struct Gate {
    slots: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(slots: usize) -> Self {
        Gate {
            slots: Mutex::new(slots.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        while *slots == 0 {
            slots = self.cv.wait(slots).unwrap_or_else(|e| e.into_inner());
        }
        *slots -= 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a Gate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut slots = self.gate.slots.lock().unwrap_or_else(|e| e.into_inner());
        *slots += 1;
        self.gate.cv.notify_one();
    }
}

/// Client for a remote embedding service speaking
/// `POST {model, inputs:[...]} -> {vectors:[[...]]}`.
///
/// Responses are renormalized client-side so downstream cosine math never
/// sees non-unit vectors. Transient failures (transport errors, HTTP 5xx and
/// 429) are retried up to 3 times with exponential backoff.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    dim: usize,
    max_batch: usize,
    gate: Gate,
    bearer: Option<String>,
    backoff_base: Duration,
}

impl RemoteEmbedder {
    /// `bearer` defaults to the GGUARD_EMBED_TOKEN environment variable.
    pub fn new(url: impl Into<String>, model: impl Into<String>, dim: usize) -> Result<Self> {
        if dim < 1 {
            return Err(Error::Config("embedding dimension must be ≥ 1".into()));
        }
        Ok(RemoteEmbedder {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
            url: url.into(),
            model: model.into(),
            dim,
            max_batch: 64,
            gate: Gate::new(8),
            bearer: std::env::var("GGUARD_EMBED_TOKEN").ok(),
            backoff_base: Duration::from_millis(50),
        })
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.gate = Gate::new(limit);
        self
    }

    pub fn with_bearer(mut self, token: Option<String>) -> Self {
        self.bearer = token;
        self
    }

    /// Shrinks retry backoff; for tests against local mock servers.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn post_chunk(&self, chunk: &[String]) -> Result<Vec<Vec<f32>>> {
        let request = EmbeddingRequest {
            model: self.model.clone(),
            inputs: chunk.to_vec(),
        };
        let mut last_err = String::new();
        for attempt in 0..4 {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * (1 << (attempt - 1)));
            }
            let _permit = self.gate.acquire();
            let mut builder = self.client.post(&self.url).json(&request);
            if let Some(token) = &self.bearer {
                builder = builder.bearer_auth(token);
            }
            match builder.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let body: EmbeddingResponse = resp
                            .json()
                            .map_err(|e| Error::Transport(format!("bad response body: {e}")))?;
                        return self.check_and_normalize(chunk.len(), body);
                    }
                    if status.is_server_error() || status.as_u16() == 429 {
                        last_err = format!("HTTP {status}");
                        continue;
                    }
                    return Err(Error::Transport(format!("HTTP {status}")));
                }
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            }
        }
        Err(Error::Transport(format!(
            "retries exhausted: {last_err}"
        )))
    }

    fn check_and_normalize(&self, expected: usize, body: EmbeddingResponse) -> Result<Vec<Vec<f32>>> {
        if body.vectors.len() != expected {
            return Err(Error::Transport(format!(
                "response count {} != input count {expected}",
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::DimMismatch {
                        expected: self.dim,
                        got: v.len(),
                    });
                }
                let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Ok(v);
                }
                Ok(v.iter().map(|x| (f64::from(*x) / norm) as f32).collect())
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.embed_batch(std::slice::from_ref(&text.to_string()))?.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.max_batch) {
            out.extend(self.post_chunk(chunk)?);
        }
        Ok(out)
    }
}

/// In-memory LRU wrapper around any embedder; capacity in distinct texts.
pub struct CachedEmbedder<E> {
    inner: E,
    capacity: usize,
    state: Mutex<LruState>,
}

#[derive(Default)]
struct LruState {
    stamp: u64,
    by_text: HashMap<String, (u64, Vec<f32>)>,
    by_stamp: std::collections::BTreeMap<u64, String>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, capacity: usize) -> Self {
        CachedEmbedder {
            inner,
            capacity: capacity.max(1),
            state: Mutex::new(LruState::default()),
        }
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        {
            let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
            state.stamp += 1;
            let stamp = state.stamp;
            if let Some((old, vec)) = state.by_text.get(text).map(|(s, v)| (*s, v.clone())) {
                state.by_stamp.remove(&old);
                state.by_stamp.insert(stamp, text.to_string());
                state.by_text.insert(text.to_string(), (stamp, vec.clone()));
                return Ok(vec);
            }
        }
        let vec = self.inner.embed(text)?;
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        state.stamp += 1;
        let stamp = state.stamp;
        state.by_stamp.insert(stamp, text.to_string());
        state.by_text.insert(text.to_string(), (stamp, vec.clone()));
        while state.by_text.len() > self.capacity {
            if let Some((&oldest, _)) = state.by_stamp.iter().next() {
                if let Some(evicted) = state.by_stamp.remove(&oldest) {
                    state.by_text.remove(&evicted);
                }
            }
        }
        Ok(vec)
    }
}
