//! Document ingestion: tokenization and overlapping token-window chunking.
//!
//! Chunks are the provenance unit for everything downstream: graph nodes
//! and edges record the chunk ids they were extracted from, and final
//! answers are grounded in chunk text. Chunk ids are a pure function of
//! `(doc_id, token_start, token_end)` so re-ingestion is idempotent.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::embedding::Vector;
use crate::error::{EngineError, Result};
use crate::store::{self, SidecarReader, SidecarWriter};

pub type DocId = String;
pub type ChunkId = String;

/// How text is split into tokens. The spec is recorded in the index
/// manifest so an index is self-describing about its token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerSpec {
    /// Split on Unicode whitespace only.
    Whitespace,
    /// Split on whitespace and treat each punctuation character as its
    /// own token (default).
    #[default]
    WhitespacePunct,
}

impl TokenizerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TokenizerSpec::Whitespace => "whitespace",
            TokenizerSpec::WhitespacePunct => "whitespace-punct",
        }
    }
}

/// A contiguous token window of one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub doc_id: DocId,
    pub text: String,
    pub token_start: usize,
    /// Exclusive.
    pub token_end: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<Vector>,
}

impl Chunk {
    /// Chunk ids are derived from coordinates, never generated.
    pub fn make_id(doc_id: &str, token_start: usize, token_end: usize) -> ChunkId {
        format!("{doc_id}:{token_start}-{token_end}")
    }
}

/// Splits text into tokens. Deterministic for a fixed spec; empty input
/// yields an empty list. Joining the tokens with single spaces
/// reconstructs the whitespace-normalized form of the text.
pub fn tokenize(text: &str, spec: TokenizerSpec) -> Vec<String> {
    match spec {
        TokenizerSpec::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        TokenizerSpec::WhitespacePunct => {
            let mut tokens = Vec::new();
            let mut current = String::new();
            for ch in text.chars() {
                if ch.is_whitespace() {
                    if !current.is_empty() {
                        tokens.push(std::mem::take(&mut current));
                    }
                } else if ch.is_alphanumeric() {
                    current.push(ch);
                } else {
                    // Punctuation and symbols stand alone.
                    if !current.is_empty() {
                        tokens.push(std::mem::take(&mut current));
                    }
                    tokens.push(ch.to_string());
                }
            }
            if !current.is_empty() {
                tokens.push(current);
            }
            tokens
        }
    }
}

/// NFC-normalizes at ingestion so chunk ids are stable across platforms.
pub fn normalize_text(text: &str) -> String {
    text.nfc().collect()
}

/// Segments a document into overlapping token windows.
///
/// Window `i` covers `[i*stride, i*stride + chunk_size)` with
/// `stride = chunk_size - overlap`, clamped to the document length.
/// Windows stop once one reaches the end of the document, so the final
/// chunk may be shorter but no chunk is ever empty and nothing past a
/// full-coverage window is emitted.
pub fn chunk_document(
    doc_id: &str,
    text: &str,
    chunk_size: usize,
    overlap: usize,
    spec: TokenizerSpec,
) -> Result<Vec<Chunk>> {
    if overlap >= chunk_size {
        return Err(EngineError::ChunkParams {
            chunk_size,
            overlap,
        });
    }
    let normalized = normalize_text(text);
    let tokens = tokenize(&normalized, spec);
    let n = tokens.len();
    if n == 0 {
        return Ok(Vec::new());
    }

    let stride = chunk_size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + chunk_size).min(n);
        chunks.push(Chunk {
            id: Chunk::make_id(doc_id, start, end),
            doc_id: doc_id.to_string(),
            text: tokens[start..end].join(" "),
            token_start: start,
            token_end: end,
            embedding: None,
        });
        if end >= n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// All chunks of an indexed corpus, keyed by chunk id.
#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    chunks: BTreeMap<ChunkId, Chunk>,
}

#[derive(Serialize, Deserialize)]
struct ChunkRecord {
    id: ChunkId,
    doc_id: DocId,
    token_start: usize,
    token_end: usize,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    emb_offset: Option<u64>,
}

impl ChunkStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, chunk: Chunk) {
        self.chunks.insert(chunk.id.clone(), chunk);
    }

    pub fn get(&self, id: &str) -> Option<&Chunk> {
        self.chunks.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.chunks.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Chunks in document order: by doc id, then window start.
    pub fn ordered(&self) -> Vec<&Chunk> {
        let mut all: Vec<&Chunk> = self.chunks.values().collect();
        all.sort_by(|a, b| {
            a.doc_id
                .cmp(&b.doc_id)
                .then(a.token_start.cmp(&b.token_start))
                .then(a.token_end.cmp(&b.token_end))
        });
        all
    }

    pub fn iter(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }

    /// Writes `chunks.jsonl` plus the `chunks.bin` embedding sidecar.
    pub fn save(&self, dir: &Path, dim: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut sidecar = SidecarWriter::create(&dir.join("chunks.bin"), dim)?;
        let mut records = Vec::with_capacity(self.chunks.len());
        for chunk in self.ordered() {
            let emb_offset = match &chunk.embedding {
                Some(v) => Some(sidecar.push(v.values())?),
                None => None,
            };
            records.push(ChunkRecord {
                id: chunk.id.clone(),
                doc_id: chunk.doc_id.clone(),
                token_start: chunk.token_start,
                token_end: chunk.token_end,
                text: chunk.text.clone(),
                emb_offset,
            });
        }
        sidecar.finish()?;
        store::write_jsonl(&dir.join("chunks.jsonl"), &records)?;
        Ok(())
    }

    pub fn load(dir: &Path, dim: usize) -> Result<Self> {
        let records: Vec<ChunkRecord> = store::read_jsonl(&dir.join("chunks.jsonl"))?;
        let mut sidecar = SidecarReader::open(&dir.join("chunks.bin"), dim)?;
        let mut chunks = BTreeMap::new();
        for r in records {
            let embedding = match r.emb_offset {
                Some(off) => Some(Vector::new(sidecar.read_at(off)?)?),
                None => None,
            };
            chunks.insert(
                r.id.clone(),
                Chunk {
                    id: r.id,
                    doc_id: r.doc_id,
                    token_start: r.token_start,
                    token_end: r.token_end,
                    text: r.text,
                    embedding,
                },
            );
        }
        Ok(Self { chunks })
    }
}
