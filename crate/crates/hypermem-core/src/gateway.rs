//! The prompt roles that drive a session: sufficiency judgment, concern
//! raising, subquery generation, memory-delta proposal (two turns:
//! update+insert, then merge), and response generation.
//!
//! Parsing follows a reprompt-then-degrade policy: one retry with a
//! format reminder, then a safe fallback (not sufficient / no concerns /
//! target-query subquery) so a malformed reply never kills a session.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{ChunkId, ChunkStore};
use crate::embedding::EmbeddingProvider;
use crate::error::Result;
use crate::graph::KnowledgeGraph;
use crate::llm::{ChatMessage, ChatProvider, ChatRequest};
use crate::memory::{InsertOp, MemoryDelta, MemoryHypergraph, MergeOp, PointId, UpdateOp};
use crate::parse::{self, parse_blocks, BlockSpec};
use crate::prompts::{fill, PromptSet};
use crate::retrieval::{rank_and_truncate, Evidence, Subquery, SubqueryMode};
use crate::trace::{ExchangeRecord, SessionTrace};

/// A doubt the model raised about current memory: either aimed at one
/// memory point or probing outside memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Concern {
    pub text: String,
    pub target_point: Option<PointId>,
}

const FORMAT_REMINDER: &str =
    "\n\nYour previous reply did not follow the required output format. \
     Reply again using exactly the format described above.";

/// Chat access bound to a prompt set and inference settings.
pub struct Gateway<'a> {
    pub provider: &'a dyn ChatProvider,
    pub prompts: &'a PromptSet,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl<'a> Gateway<'a> {
    pub fn new(provider: &'a dyn ChatProvider, prompts: &'a PromptSet) -> Self {
        Self {
            provider,
            prompts,
            temperature: 0.8,
            max_output_tokens: 2048,
        }
    }

    /// One traced chat turn.
    pub fn chat(
        &self,
        tag: &str,
        step: u32,
        prompt: String,
        trace: &mut SessionTrace,
    ) -> Result<String> {
        let mut req = ChatRequest::new(tag, step, vec![ChatMessage::user(prompt.clone())]);
        req.temperature = self.temperature;
        req.max_output_tokens = self.max_output_tokens;
        let outcome = self.provider.chat(&req)?;
        trace.record_exchange(ExchangeRecord {
            tag: tag.to_string(),
            step,
            seq: outcome.seq,
            prompt,
            response: outcome.text.clone(),
            prompt_tokens: outcome.prompt_tokens,
            completion_tokens: outcome.completion_tokens,
            latency_ms: outcome.latency_ms,
        });
        Ok(outcome.text)
    }

    /// Whether current memory suffices to answer the target query.
    /// Unparseable replies degrade to NOT sufficient after one reprompt.
    pub fn judge_sufficiency(
        &self,
        m: &MemoryHypergraph,
        target_query: &str,
        step: u32,
        trace: &mut SessionTrace,
    ) -> Result<bool> {
        let prompt = fill(
            &self.prompts.sufficiency,
            &[("target_query", target_query), ("memory", &m.render())],
        );
        let reply = self.chat("sufficiency", step, prompt.clone(), trace)?;
        if let Some(v) = parse::find_yes_no(&reply, "SUFFICIENT") {
            return Ok(v);
        }
        let reply = self.chat("sufficiency", step, prompt + FORMAT_REMINDER, trace)?;
        match parse::find_yes_no(&reply, "SUFFICIENT") {
            Some(v) => Ok(v),
            None => {
                log::warn!("sufficiency reply unparseable twice at step {step}; continuing retrieval");
                Ok(false)
            }
        }
    }

    /// Concerns over current memory. Targets naming unknown or retired
    /// points are dropped to untargeted. Two unparseable replies yield an
    /// empty list; the orchestrator then forces a global concern.
    pub fn raise_concerns(
        &self,
        m: &MemoryHypergraph,
        target_query: &str,
        step: u32,
        trace: &mut SessionTrace,
    ) -> Result<Vec<Concern>> {
        let spec = BlockSpec::new().kind("CONCERN", &["target", "text"]);
        let prompt = fill(
            &self.prompts.concerns,
            &[("target_query", target_query), ("memory", &m.render())],
        );
        for attempt in 0..2 {
            let text = if attempt == 0 {
                prompt.clone()
            } else {
                prompt.clone() + FORMAT_REMINDER
            };
            let reply = self.chat("concerns", step, text, trace)?;
            let mut concerns = Vec::new();
            for block in parse_blocks(&reply, &spec) {
                let Some(text) = block.get("text").filter(|t| !t.is_empty()) else {
                    continue;
                };
                let target_point = match block.get("target") {
                    None => None,
                    Some(t) if t.is_empty() || t.eq_ignore_ascii_case("none") => None,
                    Some(t) => {
                        if m.is_live(t) {
                            Some(t.to_string())
                        } else {
                            log::warn!("concern targets unknown or retired point {t}; dropping target");
                            None
                        }
                    }
                };
                concerns.push(Concern {
                    text: text.to_string(),
                    target_point,
                });
            }
            if !concerns.is_empty() || reply_is_explicitly_empty(&reply) {
                return Ok(concerns);
            }
        }
        log::warn!("no parseable concerns at step {step} after reprompt");
        Ok(Vec::new())
    }

    /// Subqueries from concerns. A subquery is local iff its source
    /// concern targeted a point; the target is carried as its anchor.
    /// Empty concerns degrade to a single global subquery over the target
    /// query without calling the model.
    pub fn generate_subqueries(
        &self,
        concerns: &[Concern],
        m: &MemoryHypergraph,
        target_query: &str,
        max_subqueries: usize,
        step: u32,
        trace: &mut SessionTrace,
    ) -> Result<Vec<Subquery>> {
        if concerns.is_empty() {
            return Ok(vec![Subquery::global(target_query, step)]);
        }
        let numbered = concerns
            .iter()
            .enumerate()
            .map(|(i, c)| match &c.target_point {
                Some(p) => format!("{}. [targets {p}] {}", i + 1, c.text),
                None => format!("{}. [outside memory] {}", i + 1, c.text),
            })
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = fill(
            &self.prompts.subqueries,
            &[
                ("target_query", target_query),
                ("memory", &m.render()),
                ("concerns", &numbered),
            ],
        );
        let spec = BlockSpec::new().kind("SUBQUERY", &["concern", "text"]);
        for attempt in 0..2 {
            let text = if attempt == 0 {
                prompt.clone()
            } else {
                prompt.clone() + FORMAT_REMINDER
            };
            let reply = self.chat("subqueries", step, text, trace)?;
            let mut subqueries = Vec::new();
            for block in parse_blocks(&reply, &spec) {
                if subqueries.len() >= max_subqueries {
                    break;
                }
                let Some(text) = block.get("text").filter(|t| !t.is_empty()) else {
                    continue;
                };
                let source = block
                    .get("concern")
                    .and_then(|n| n.parse::<usize>().ok())
                    .and_then(|n| n.checked_sub(1))
                    .and_then(|i| concerns.get(i));
                let subquery = match source.and_then(|c| c.target_point.clone()) {
                    Some(anchor) => Subquery::local(text, anchor, step),
                    None => Subquery::global(text, step),
                };
                subqueries.push(subquery);
            }
            if !subqueries.is_empty() {
                return Ok(subqueries);
            }
        }
        log::warn!("no parseable subqueries at step {step}; degrading to the target query");
        Ok(vec![Subquery::global(target_query, step)])
    }

    /// Proposes one step's memory evolution in two turns: update+insert
    /// over the evidence, then merges over the post-insert memory
    /// rendering. Ids are validated against live memory; malformed
    /// proposals drop item-wise.
    #[allow(clippy::too_many_arguments)]
    pub fn propose_memory_delta(
        &self,
        m: &MemoryHypergraph,
        g: &KnowledgeGraph,
        embedder: &dyn EmbeddingProvider,
        evidence: &[Evidence],
        target_query: &str,
        enable_update: bool,
        enable_merge: bool,
        step: u32,
        trace: &mut SessionTrace,
    ) -> Result<MemoryDelta> {
        let evidence_text = render_evidence(evidence);
        let known_chunks: BTreeSet<ChunkId> = evidence
            .iter()
            .flat_map(|e| e.chunks.iter().map(|c| c.id.clone()))
            .collect();

        let prompt = fill(
            &self.prompts.memory_delta,
            &[
                ("target_query", target_query),
                ("memory", &m.render()),
                ("evidence", &evidence_text),
            ],
        );
        let spec = BlockSpec::new()
            .kind("UPDATE", &["point", "description"])
            .kind("INSERT", &["entities", "description", "chunks"]);
        let reply = self.chat("memory_delta", step, prompt, trace)?;

        let mut updates = Vec::new();
        let mut insertions = Vec::new();
        for block in parse_blocks(&reply, &spec) {
            match block.kind.as_str() {
                "UPDATE" => {
                    let (Some(point), Some(description)) =
                        (block.get("point"), block.get("description"))
                    else {
                        log::warn!("dropping UPDATE block missing fields at step {step}");
                        continue;
                    };
                    if !enable_update {
                        log::info!("update operation disabled; dropping proposal for {point}");
                        continue;
                    }
                    if !m.is_live(point) {
                        log::warn!("dropping UPDATE for unknown or retired point {point}");
                        continue;
                    }
                    updates.push(UpdateOp {
                        point_id: point.to_string(),
                        description: description.to_string(),
                    });
                }
                "INSERT" => {
                    let (Some(entities), Some(description)) =
                        (block.get("entities"), block.get("description"))
                    else {
                        log::warn!("dropping INSERT block missing fields at step {step}");
                        continue;
                    };
                    let vertex_names = parse::split_list(entities);
                    if vertex_names.is_empty() || description.is_empty() {
                        continue;
                    }
                    let provenance =
                        parse_provenance(block.get("chunks").unwrap_or(""), &known_chunks);
                    insertions.push(InsertOp {
                        description: description.to_string(),
                        vertex_names,
                        provenance,
                    });
                }
                _ => {}
            }
        }

        let mut merges = Vec::new();
        if enable_merge {
            // Render the memory as it will look after updates and inserts
            // so merge proposals can reference this step's new points.
            // Point ids assigned on the preview match the real
            // application because assignment is a deterministic counter.
            let mut preview_m = m.clone();
            let mut preview_g = g.clone();
            let partial = MemoryDelta {
                updates: updates.clone(),
                insertions: insertions.clone(),
                merges: Vec::new(),
            };
            preview_m.apply_delta(&mut preview_g, embedder, &partial);

            let merge_prompt = fill(
                &self.prompts.merge_description,
                &[
                    ("target_query", target_query),
                    ("memory", &preview_m.render()),
                ],
            );
            let merge_spec = BlockSpec::new().kind("MERGE", &["points", "description"]);
            let reply = self.chat("merge_description", step, merge_prompt, trace)?;
            for block in parse_blocks(&reply, &merge_spec) {
                let (Some(points), Some(description)) =
                    (block.get("points"), block.get("description"))
                else {
                    log::warn!("dropping MERGE block missing fields at step {step}");
                    continue;
                };
                let ids = parse::split_list(points);
                if ids.len() != 2 || description.is_empty() {
                    log::warn!("dropping MERGE block with {} point ids", ids.len());
                    continue;
                }
                if !preview_m.is_live(&ids[0]) || !preview_m.is_live(&ids[1]) {
                    log::warn!(
                        "dropping MERGE referencing unknown points {} + {}",
                        ids[0],
                        ids[1]
                    );
                    continue;
                }
                merges.push(MergeOp {
                    left: ids[0].clone(),
                    right: ids[1].clone(),
                    description: description.to_string(),
                });
            }
        }

        Ok(MemoryDelta {
            updates,
            insertions,
            merges,
        })
    }

    /// Final (or forced per-step) response from memory-point descriptions
    /// plus the chunks associated with all memory entities, ranked by
    /// similarity to the target query and capped at `chunk_budget`.
    pub fn generate_response(
        &self,
        m: &MemoryHypergraph,
        chunk_store: &ChunkStore,
        embedder: &dyn EmbeddingProvider,
        target_query: &str,
        chunk_budget: usize,
        step: u32,
        trace: &mut SessionTrace,
    ) -> Result<String> {
        let mut pool = Vec::new();
        for cid in m.chunk_provenance() {
            match chunk_store.get(&cid) {
                Some(chunk) => {
                    if let Some(embedding) = &chunk.embedding {
                        pool.push((cid.clone(), embedding, chunk));
                    }
                }
                None => log::warn!("memory provenance chunk {cid} missing from store"),
            }
        }
        let chunks_text = if pool.is_empty() {
            NO_CHUNKS_SENTINEL.to_string()
        } else {
            let query_vector = embedder.embed_one(target_query)?;
            let picked = rank_and_truncate(pool.into_iter(), &query_vector, chunk_budget)?;
            picked
                .iter()
                .map(|c| format!("[{}] {}", c.id, c.text))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let prompt = fill(
            &self.prompts.answer,
            &[
                ("target_query", target_query),
                ("memory", &m.render()),
                ("chunks", &chunks_text),
            ],
        );
        self.chat("answer", step, prompt, trace)
    }
}

pub const NO_CHUNKS_SENTINEL: &str = "(no associated chunks)";

fn reply_is_explicitly_empty(reply: &str) -> bool {
    reply.lines().any(|l| l.trim() == "NONE")
}

/// Parses `Name=c1,c2 | Other=c3`, keeping only chunk ids present in the
/// evidence batch.
fn parse_provenance(
    value: &str,
    known_chunks: &BTreeSet<ChunkId>,
) -> BTreeMap<String, BTreeSet<ChunkId>> {
    let mut out = BTreeMap::new();
    for part in parse::split_list(value) {
        let Some((name, ids)) = part.split_once('=') else {
            continue;
        };
        let name = name.trim().to_string();
        let chunk_ids: BTreeSet<ChunkId> = ids
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .filter(|c| {
                let known = known_chunks.contains(*c);
                if !known {
                    log::warn!("insertion provenance names unknown chunk {c}; dropping");
                }
                known
            })
            .map(str::to_string)
            .collect();
        if !chunk_ids.is_empty() {
            out.insert(name, chunk_ids);
        }
    }
    out
}

/// Evidence rendered for the consolidation prompt: entities with their
/// provenance, relations, and chunk texts, grouped per subquery.
pub fn render_evidence(evidence: &[Evidence]) -> String {
    if evidence.iter().all(Evidence::is_empty) {
        return "(no evidence retrieved this step)".to_string();
    }
    let mut out = String::new();
    for ev in evidence {
        if ev.is_empty() {
            continue;
        }
        let mode = match ev.subquery.mode {
            SubqueryMode::Local => "local",
            SubqueryMode::Global => "global",
        };
        out.push_str(&format!("SUBQUERY ({mode}): {}\n", ev.subquery.text));
        out.push_str("entities:\n");
        for entity in &ev.entities {
            let chunks: Vec<&str> = entity.chunk_ids.iter().map(String::as_str).collect();
            if entity.description.is_empty() {
                out.push_str(&format!("- {} (chunks: {})\n", entity.name, chunks.join(", ")));
            } else {
                out.push_str(&format!(
                    "- {}: {} (chunks: {})\n",
                    entity.name,
                    entity.description.replace('\n', " "),
                    chunks.join(", ")
                ));
            }
        }
        if !ev.relations.is_empty() {
            out.push_str("relations:\n");
            for r in &ev.relations {
                out.push_str(&format!(
                    "- {} -> {}: {}\n",
                    r.source,
                    r.target,
                    r.description.replace('\n', " ")
                ));
            }
        }
        if !ev.chunks.is_empty() {
            out.push_str("chunks:\n");
            for c in &ev.chunks {
                out.push_str(&format!("[{}] {}\n", c.id, c.text));
            }
        }
        out.push('\n');
    }
    out
}
