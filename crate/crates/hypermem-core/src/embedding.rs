//! Text embeddings and exact top-k cosine retrieval.
//!
//! Search is brute force on purpose: corpora are single documents, so an
//! exhaustive scan over an explicit candidate set is fast and removes a
//! correctness variable. Ties are broken by ascending item id to keep
//! traces reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EngineError, Result};

pub type ItemId = String;

/// A fixed-length dense vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFiniteVector);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// Cosine similarity `dot(a,b) / (|a|*|b|)` accumulated in f64.
///
/// Errors on dimension mismatch and on zero vectors, where the value is
/// undefined.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(EngineError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.values().iter().zip(b.values()) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EngineError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Immutable-after-build map from item id to vector.
#[derive(Debug, Clone, Default)]
pub struct VectorIndex {
    entries: BTreeMap<ItemId, Vector>,
    dim: usize,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&Vector> {
        self.entries.get(id)
    }

    /// Inserts or replaces a vector; the id stays unique.
    pub fn insert(&mut self, id: impl Into<ItemId>, vector: Vector) -> Result<()> {
        if vector.dim() != self.dim {
            return Err(EngineError::DimensionMismatch {
                left: vector.dim(),
                right: self.dim,
            });
        }
        self.entries.insert(id.into(), vector);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.entries.keys()
    }
}

/// Exact top-k by cosine similarity over an explicit candidate set.
///
/// Returns the k best candidates in descending score order, ties broken
/// by ascending item id. When fewer than k candidates exist, all are
/// returned. Every candidate must be present in the index.
pub fn top_k(
    query: &Vector,
    candidates: &BTreeSet<ItemId>,
    index: &VectorIndex,
    k: usize,
) -> Result<Vec<ItemId>> {
    if k == 0 || candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored: Vec<(f64, &ItemId)> = Vec::with_capacity(candidates.len());
    for id in candidates {
        let vector = index
            .get(id)
            .ok_or_else(|| EngineError::UnknownItem(id.clone()))?;
        scored.push((cosine_similarity(query, vector)?, id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.clone()).collect())
}

/// A batch text-embedding backend.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable provider name, recorded in the index manifest.
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// One vector per input, order-preserving.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vector>>;

    /// Convenience for single strings.
    fn embed_one(&self, text: &str) -> Result<Vector> {
        let mut out = self.embed(std::slice::from_ref(&text.to_string()))?;
        out.pop().ok_or(EngineError::RetrievalUnavailable {
            attempts: 1,
            reason: "provider returned no vector".into(),
            batch_len: 1,
        })
    }
}

/// Deterministic unit vector derived from the SHA-256 of the text.
/// Identical text always embeds to the identical vector.
pub fn content_hash_vector(text: &str, dim: usize) -> Vector {
    let digest = Sha256::digest(text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut values: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let norm = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        values[0] = 1.0;
    } else {
        for v in &mut values {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Vector(values)
}

/// Hex SHA-256 of a string, used for content-hash fixture keys and cache
/// keys.
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Fixture-backed provider for reproducible runs.
///
/// Entries map exact strings (or their hex SHA-256) to vectors. When the
/// fixture declares `"fallback": "content-hash"`, strings missing from
/// the map embed to a deterministic hash-derived unit vector instead of
/// erroring.
pub struct ScriptedEmbedder {
    dim: usize,
    entries: HashMap<String, Vector>,
    hash_fallback: bool,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFixtureFile {
    dim: usize,
    #[serde(default)]
    fallback: Option<String>,
    #[serde(default)]
    entries: BTreeMap<String, Vec<f32>>,
}

impl ScriptedEmbedder {
    pub fn new(dim: usize, hash_fallback: bool) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
            hash_fallback,
        }
    }

    pub fn with_entry(mut self, text: impl Into<String>, values: Vec<f32>) -> Self {
        self.entries.insert(text.into(), Vector(values));
        self
    }

    pub fn insert(&mut self, text: impl Into<String>, values: Vec<f32>) {
        self.entries.insert(text.into(), Vector(values));
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: EmbeddingFixtureFile =
            serde_json::from_str(&raw).map_err(|e| EngineError::CorruptStore {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        let hash_fallback = match file.fallback.as_deref() {
            None => false,
            Some("content-hash") => true,
            Some(other) => {
                return Err(EngineError::Config(format!(
                    "unknown embedding fixture fallback \"{other}\""
                )))
            }
        };
        let mut entries = HashMap::new();
        for (k, v) in file.entries {
            if v.len() != file.dim {
                return Err(EngineError::DimensionMismatch {
                    left: v.len(),
                    right: file.dim,
                });
            }
            entries.insert(k, Vector::new(v)?);
        }
        Ok(Self {
            dim: file.dim,
            entries,
            hash_fallback,
        })
    }
}

impl EmbeddingProvider for ScriptedEmbedder {
    fn name(&self) -> &str {
        "scripted"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vector>> {
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            if let Some(v) = self.entries.get(text) {
                out.push(v.clone());
            } else if let Some(v) = self.entries.get(&content_hash(text)) {
                out.push(v.clone());
            } else if self.hash_fallback {
                out.push(content_hash_vector(text, self.dim));
            } else {
                return Err(EngineError::RetrievalUnavailable {
                    attempts: 1,
                    reason: format!("no scripted embedding for {:?}", truncate(text, 60)),
                    batch_len: texts.len(),
                });
            }
        }
        Ok(out)
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_string()
    } else {
        let cut: String = s.chars().take(max).collect();
        format!("{cut}…")
    }
}

/// OpenAI-compatible `/v1/embeddings` client with bounded retries.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    max_retries: u32,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingsDatum>,
}

#[derive(Deserialize)]
struct EmbeddingsDatum {
    index: usize,
    embedding: Vec<f32>,
}

impl HttpEmbedder {
    /// Connects and performs a handshake call to learn the dimension.
    pub fn connect(base_url: &str, model: &str, api_key: Option<String>) -> Result<Self> {
        let mut provider = Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            dim: 0,
            max_retries: 3,
            client: reqwest::blocking::Client::new(),
        };
        let probe = provider.request(&["dimension probe".to_string()])?;
        provider.dim = probe.first().map(Vector::dim).unwrap_or(0);
        if provider.dim == 0 {
            return Err(EngineError::RetrievalUnavailable {
                attempts: 1,
                reason: "handshake returned no vector".into(),
                batch_len: 1,
            });
        }
        Ok(provider)
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Vector>> {
        let mut last_err = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 * (1 << attempt.min(4))));
            }
            let mut req = self
                .client
                .post(format!("{}/v1/embeddings", self.base_url))
                .json(&EmbeddingsRequest {
                    model: &self.model,
                    input: texts,
                });
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let body: EmbeddingsResponse =
                        resp.json().map_err(|e| EngineError::RetrievalUnavailable {
                            attempts: attempt + 1,
                            reason: e.to_string(),
                            batch_len: texts.len(),
                        })?;
                    let mut data = body.data;
                    data.sort_by_key(|d| d.index);
                    let mut out = Vec::with_capacity(data.len());
                    for d in data {
                        out.push(Vector::new(d.embedding)?);
                    }
                    if out.len() != texts.len() {
                        return Err(EngineError::RetrievalUnavailable {
                            attempts: attempt + 1,
                            reason: format!("expected {} vectors, got {}", texts.len(), out.len()),
                            batch_len: texts.len(),
                        });
                    }
                    return Ok(out);
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(EngineError::RetrievalUnavailable {
            attempts: self.max_retries + 1,
            reason: last_err,
            batch_len: texts.len(),
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn name(&self) -> &str {
        "http"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.request(texts)
    }
}
