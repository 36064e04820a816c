//! Index building and loading: chunk the corpus, extract the graph,
//! embed everything, and persist it all behind a manifest. Re-running
//! with identical inputs is a content-hash no-op.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ProjectConfig;
use crate::corpus::{chunk_document, Chunk, ChunkStore, TokenizerSpec};
use crate::embedding::{content_hash, EmbeddingProvider, Vector};
use crate::error::{EngineError, Result};
use crate::graph::{extract_graph, ExtractionParams, KnowledgeGraph};
use crate::llm::ChatProvider;
use crate::prompts::PromptSet;
use crate::store::{self, STORE_VERSION};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexManifest {
    pub version: u32,
    pub tokenizer: TokenizerSpec,
    pub chunk_size: usize,
    pub overlap: usize,
    pub embedding_provider: String,
    pub embedding_dim: usize,
    /// Hash over corpus contents and build-relevant parameters; equal
    /// hash means the index is up to date.
    pub input_hash: String,
    pub doc_count: usize,
    pub chunk_count: usize,
    pub node_count: usize,
    pub edge_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuildOutcome {
    UpToDate,
    Built {
        docs: usize,
        chunks: usize,
        nodes: usize,
        edges: usize,
    },
}

/// Per-chunk extraction result, surfaced to the CLI for reporting.
#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub outcome: Option<BuildOutcome>,
}

/// Content-hash cache so rebuilds skip provider calls for unchanged
/// texts. Persisted next to the index as JSONL records.
struct CachingEmbedder<'a> {
    inner: &'a dyn EmbeddingProvider,
    cache: Mutex<HashMap<String, Vector>>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    hash: String,
    values: Vec<f32>,
}

impl<'a> CachingEmbedder<'a> {
    fn load(inner: &'a dyn EmbeddingProvider, path: &Path) -> Self {
        let mut cache = HashMap::new();
        if path.exists() {
            match store::read_jsonl::<CacheRecord>(path) {
                Ok(records) => {
                    for r in records {
                        if r.values.len() == inner.dim() {
                            if let Ok(v) = Vector::new(r.values) {
                                cache.insert(r.hash, v);
                            }
                        }
                    }
                }
                Err(e) => log::warn!("ignoring unreadable embedding cache: {e}"),
            }
        }
        Self {
            inner,
            cache: Mutex::new(cache),
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let cache = self.cache.lock().expect("cache lock poisoned");
        let mut records: Vec<CacheRecord> = cache
            .iter()
            .map(|(hash, v)| CacheRecord {
                hash: hash.clone(),
                values: v.values().to_vec(),
            })
            .collect();
        records.sort_by(|a, b| a.hash.cmp(&b.hash));
        store::write_jsonl(path, &records)
    }
}

impl EmbeddingProvider for CachingEmbedder<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vector>> {
        let mut out: Vec<Option<Vector>> = vec![None; texts.len()];
        let mut misses: Vec<(usize, String)> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock poisoned");
            for (i, text) in texts.iter().enumerate() {
                match cache.get(&content_hash(text)) {
                    Some(v) => out[i] = Some(v.clone()),
                    None => misses.push((i, text.clone())),
                }
            }
        }
        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|(_, t)| t.clone()).collect();
            let vectors = self.inner.embed(&batch)?;
            let mut cache = self.cache.lock().expect("cache lock poisoned");
            for ((i, text), v) in misses.into_iter().zip(vectors) {
                cache.insert(content_hash(&text), v.clone());
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

/// Reads `.txt` documents (sorted by file name; doc id = file stem).
pub fn read_corpus(dir: &Path) -> Result<Vec<(String, String)>> {
    if !dir.is_dir() {
        return Err(EngineError::EmptyCorpus(dir.display().to_string()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EngineError::EmptyCorpus(dir.display().to_string()));
    }
    let mut docs = Vec::with_capacity(paths.len());
    for path in paths {
        let doc_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("doc")
            .to_string();
        docs.push((doc_id, std::fs::read_to_string(&path)?));
    }
    Ok(docs)
}

fn input_hash(
    docs: &[(String, String)],
    config: &ProjectConfig,
    embedder: &dyn EmbeddingProvider,
) -> String {
    let mut hasher = Sha256::new();
    for (doc_id, text) in docs {
        hasher.update(doc_id.as_bytes());
        hasher.update([0]);
        hasher.update(text.as_bytes());
        hasher.update([0]);
    }
    hasher.update(config.chunking.tokenizer.name().as_bytes());
    hasher.update(config.chunking.chunk_size.to_le_bytes());
    hasher.update(config.chunking.overlap.to_le_bytes());
    hasher.update(embedder.name().as_bytes());
    hasher.update(embedder.dim().to_le_bytes());
    hex::encode(hasher.finalize())
}

/// Builds (or refreshes) the index directory. Returns `UpToDate` without
/// touching any file when the input hash matches the existing manifest.
pub fn build_index(
    config: &ProjectConfig,
    corpus_dir: &Path,
    out_dir: &Path,
    chat: &dyn ChatProvider,
    embedder: &dyn EmbeddingProvider,
    prompts: &PromptSet,
    force: bool,
) -> Result<BuildOutcome> {
    let docs = read_corpus(corpus_dir)?;
    let hash = input_hash(&docs, config, embedder);

    let manifest_path = out_dir.join("manifest.json");
    if !force && manifest_path.exists() {
        if let Ok(existing) = load_manifest(&manifest_path) {
            if existing.version == STORE_VERSION && existing.input_hash == hash {
                return Ok(BuildOutcome::UpToDate);
            }
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let cache_path = out_dir.join("embed_cache.jsonl");
    let caching = CachingEmbedder::load(embedder, &cache_path);

    // Chunk every document in deterministic order.
    let mut store = ChunkStore::new();
    let mut ordered: Vec<Chunk> = Vec::new();
    for (doc_id, text) in &docs {
        let chunks = chunk_document(
            doc_id,
            text,
            config.chunking.chunk_size,
            config.chunking.overlap,
            config.chunking.tokenizer,
        )?;
        if chunks.is_empty() {
            log::warn!("document {doc_id} produced no chunks; skipping");
        }
        ordered.extend(chunks);
    }
    if ordered.is_empty() {
        return Err(EngineError::EmptyCorpus(format!(
            "{} (no document yielded chunks)",
            corpus_dir.display()
        )));
    }

    // Embed chunk texts in one deterministic batch.
    let texts: Vec<String> = ordered.iter().map(|c| c.text.clone()).collect();
    let vectors = caching.embed(&texts)?;
    for (chunk, vector) in ordered.iter_mut().zip(vectors) {
        chunk.embedding = Some(vector);
    }
    for chunk in &ordered {
        store.insert(chunk.clone());
    }

    // Offline graph extraction over the same chunk order.
    let params = ExtractionParams {
        prompt: prompts.extract.clone(),
        summarize_prompt: prompts.summarize.clone(),
        max_retries: config.extraction.max_retries,
        max_description_fragments: config.extraction.max_description_fragments,
    };
    let graph = extract_graph(&ordered, chat, &caching, &params)?;

    let dim = embedder.dim();
    store.save(out_dir, dim)?;
    graph.save(out_dir, dim)?;
    caching.save(&cache_path)?;

    let manifest = IndexManifest {
        version: STORE_VERSION,
        tokenizer: config.chunking.tokenizer,
        chunk_size: config.chunking.chunk_size,
        overlap: config.chunking.overlap,
        embedding_provider: embedder.name().to_string(),
        embedding_dim: dim,
        input_hash: hash,
        doc_count: docs.len(),
        chunk_count: store.len(),
        node_count: graph.node_count(),
        edge_count: graph.edge_count(),
    };
    std::fs::write(&manifest_path, serde_json::to_string(&manifest)? + "\n")?;

    Ok(BuildOutcome::Built {
        docs: manifest.doc_count,
        chunks: manifest.chunk_count,
        nodes: manifest.node_count,
        edges: manifest.edge_count,
    })
}

fn load_manifest(path: &Path) -> Result<IndexManifest> {
    let raw = std::fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| EngineError::CorruptStore {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub struct LoadedIndex {
    pub manifest: IndexManifest,
    pub chunks: ChunkStore,
    pub graph: KnowledgeGraph,
}

pub fn load_index(dir: &Path) -> Result<LoadedIndex> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(EngineError::MissingIndex(dir.display().to_string()));
    }
    let manifest = load_manifest(&manifest_path)?;
    if manifest.version != STORE_VERSION {
        return Err(EngineError::VersionMismatch {
            expected: STORE_VERSION,
            found: manifest.version,
        });
    }
    let chunks = ChunkStore::load(dir, manifest.embedding_dim)?;
    let graph = KnowledgeGraph::load(dir)?;
    Ok(LoadedIndex {
        manifest,
        chunks,
        graph,
    })
}
