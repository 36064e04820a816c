//! The external knowledge graph: entities, binary relationships, chunk
//! provenance, and the offline extraction that builds it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, ChunkId};
use crate::embedding::{EmbeddingProvider, Vector};
use crate::error::{EngineError, Result};
use crate::llm::{ChatMessage, ChatProvider, ChatRequest};
use crate::parse::{parse_blocks, BlockSpec};
use crate::store::{self, SidecarReader, SidecarWriter, STORE_VERSION};

pub type EntityId = String;
pub type EdgeId = String;

/// Separator between accumulated description fragments.
const FRAGMENT_SEP: char = '\n';

/// Entity identity is the case-folded, whitespace-collapsed name. This is
/// the only matching rule used to unify memory vertices with graph nodes.
pub fn normalize_entity_name(name: &str) -> EntityId {
    crate::corpus::normalize_text(name)
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// An extracted entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityNode {
    pub id: EntityId,
    pub name: String,
    pub description: String,
    pub chunk_ids: BTreeSet<ChunkId>,
    pub embedding: Vector,
}

impl EntityNode {
    /// Text fed to the embedding provider for this node.
    pub fn embed_text(&self) -> String {
        if self.description.is_empty() {
            self.name.clone()
        } else {
            format!("{}\n{}", self.name, self.description)
        }
    }

    pub fn description_fragments(&self) -> usize {
        if self.description.is_empty() {
            0
        } else {
            self.description.split(FRAGMENT_SEP).count()
        }
    }
}

/// A binary relationship between two entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub id: EdgeId,
    pub source: EntityId,
    pub target: EntityId,
    pub description: String,
    pub chunk_ids: BTreeSet<ChunkId>,
    pub embedding: Vector,
}

impl RelationEdge {
    pub fn embed_text(&self) -> String {
        if self.description.is_empty() {
            format!("{} -> {}", self.source, self.target)
        } else {
            self.description.clone()
        }
    }

    /// The endpoint opposite `v`, if `v` is an endpoint at all.
    pub fn other_endpoint(&self, v: &str) -> Option<&EntityId> {
        if self.source == v {
            Some(&self.target)
        } else if self.target == v {
            Some(&self.source)
        } else {
            None
        }
    }
}

/// A relationship to insert alongside a forced node, endpoints by name.
#[derive(Debug, Clone)]
pub struct RelationSpec {
    pub source_name: String,
    pub target_name: String,
    pub description: String,
    pub chunk_ids: BTreeSet<ChunkId>,
}

/// The graph: nodes, edges, and an adjacency map kept consistent with the
/// edge set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<EntityId, EntityNode>,
    edges: BTreeMap<EdgeId, RelationEdge>,
    adjacency: BTreeMap<EntityId, BTreeSet<EdgeId>>,
    next_edge_seq: u64,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: &str) -> Option<&EntityNode> {
        self.nodes.get(id)
    }

    pub fn edge(&self, id: &str) -> Option<&RelationEdge> {
        self.edges.get(id)
    }

    pub fn contains_node(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &EntityNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &RelationEdge> {
        self.edges.values()
    }

    pub fn node_ids(&self) -> BTreeSet<EntityId> {
        self.nodes.keys().cloned().collect()
    }

    /// Edge ids incident to an entity.
    pub fn incident_edges(&self, v: &str) -> BTreeSet<EdgeId> {
        self.adjacency.get(v).cloned().unwrap_or_default()
    }

    /// All entities sharing an edge with `v`, excluding `v` itself.
    pub fn neighbors(&self, v: &str) -> Result<BTreeSet<EntityId>> {
        if !self.nodes.contains_key(v) {
            return Err(EngineError::UnknownEntity(v.to_string()));
        }
        let mut out = BTreeSet::new();
        if let Some(edge_ids) = self.adjacency.get(v) {
            for eid in edge_ids {
                if let Some(other) = self.edges[eid].other_endpoint(v) {
                    if other != v {
                        out.insert(other.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    fn ensure_node(
        &mut self,
        name: &str,
        description: &str,
        chunk_ids: &BTreeSet<ChunkId>,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<EntityId> {
        let id = normalize_entity_name(name);
        if id.is_empty() {
            return Err(EngineError::UnknownEntity("<empty name>".into()));
        }
        let mut needs_embed = false;
        match self.nodes.get_mut(&id) {
            Some(node) => {
                if !description.is_empty() && !has_fragment(&node.description, description) {
                    append_fragment(&mut node.description, description);
                    needs_embed = true;
                }
                node.chunk_ids.extend(chunk_ids.iter().cloned());
            }
            None => {
                self.nodes.insert(
                    id.clone(),
                    EntityNode {
                        id: id.clone(),
                        name: name.trim().to_string(),
                        description: description.to_string(),
                        chunk_ids: chunk_ids.clone(),
                        embedding: Vector::new(vec![])?,
                    },
                );
                self.adjacency.entry(id.clone()).or_default();
                needs_embed = true;
            }
        }
        if needs_embed {
            let text = self.nodes[&id].embed_text();
            let embedding = embedder.embed_one(&text)?;
            self.nodes.get_mut(&id).expect("just ensured").embedding = embedding;
        }
        Ok(id)
    }

    /// Adds a relation, unifying with an existing edge when both the
    /// unordered endpoint pair and the description match. Self-relations
    /// are rejected.
    pub fn add_relation(
        &mut self,
        spec: &RelationSpec,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<Option<EdgeId>> {
        let source = self.ensure_node(&spec.source_name, "", &BTreeSet::new(), embedder)?;
        let target = self.ensure_node(&spec.target_name, "", &BTreeSet::new(), embedder)?;
        if source == target {
            return Ok(None);
        }

        // Same unordered pair + same description: extend provenance only.
        let existing = self.edges.values_mut().find(|e| {
            e.description == spec.description
                && ((e.source == source && e.target == target)
                    || (e.source == target && e.target == source))
        });
        if let Some(edge) = existing {
            edge.chunk_ids.extend(spec.chunk_ids.iter().cloned());
            return Ok(Some(edge.id.clone()));
        }

        let id = format!("e{}", self.next_edge_seq);
        self.next_edge_seq += 1;
        let edge = RelationEdge {
            id: id.clone(),
            source: source.clone(),
            target: target.clone(),
            description: spec.description.clone(),
            chunk_ids: spec.chunk_ids.clone(),
            embedding: Vector::new(vec![])?,
        };
        let embedding = embedder.embed_one(&edge.embed_text())?;
        let mut edge = edge;
        edge.embedding = embedding;
        self.adjacency.entry(source).or_default().insert(id.clone());
        self.adjacency.entry(target).or_default().insert(id.clone());
        self.edges.insert(id.clone(), edge);
        Ok(Some(id))
    }

    /// Inserts or refreshes a node. New nodes bring their associated
    /// relationships along, creating missing endpoints with empty
    /// provenance. Existing nodes get their description appended and
    /// their embedding recomputed.
    pub fn upsert_node(
        &mut self,
        name: &str,
        description: &str,
        chunk_ids: &BTreeSet<ChunkId>,
        associated_relations: &[RelationSpec],
        embedder: &dyn EmbeddingProvider,
    ) -> Result<EntityId> {
        let id = self.ensure_node(name, description, chunk_ids, embedder)?;
        for rel in associated_relations {
            self.add_relation(rel, embedder)?;
        }
        Ok(id)
    }

    /// Checks referential integrity; returns human-readable violations.
    pub fn integrity_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for edge in self.edges.values() {
            if !self.nodes.contains_key(&edge.source) {
                out.push(format!("edge {} has dangling source {}", edge.id, edge.source));
            }
            if !self.nodes.contains_key(&edge.target) {
                out.push(format!("edge {} has dangling target {}", edge.id, edge.target));
            }
            if edge.source == edge.target {
                out.push(format!("edge {} is a self-loop", edge.id));
            }
        }
        for (v, edge_ids) in &self.adjacency {
            for eid in edge_ids {
                match self.edges.get(eid) {
                    None => out.push(format!("adjacency of {v} references missing edge {eid}")),
                    Some(e) if e.source != *v && e.target != *v => {
                        out.push(format!("adjacency of {v} lists non-incident edge {eid}"))
                    }
                    _ => {}
                }
            }
        }
        for (id, node) in &self.nodes {
            if *id != normalize_entity_name(&node.name) {
                out.push(format!("node {id} key does not match normalize({})", node.name));
            }
            if !self.adjacency.contains_key(id) {
                out.push(format!("node {id} missing adjacency entry"));
            }
        }
        out
    }

    pub fn save(&self, dir: &Path, dim: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut sidecar = SidecarWriter::create(&dir.join("graph.bin"), dim)?;
        let mut node_records = Vec::with_capacity(self.nodes.len());
        for node in self.nodes.values() {
            node_records.push(NodeRecord {
                id: node.id.clone(),
                name: node.name.clone(),
                description: node.description.clone(),
                chunk_ids: node.chunk_ids.clone(),
                emb_offset: sidecar.push(node.embedding.values())?,
            });
        }
        let mut edge_records = Vec::with_capacity(self.edges.len());
        for edge in self.edges.values() {
            edge_records.push(EdgeRecord {
                id: edge.id.clone(),
                source: edge.source.clone(),
                target: edge.target.clone(),
                description: edge.description.clone(),
                chunk_ids: edge.chunk_ids.clone(),
                emb_offset: sidecar.push(edge.embedding.values())?,
            });
        }
        sidecar.finish()?;
        store::write_jsonl(&dir.join("nodes.jsonl"), &node_records)?;
        store::write_jsonl(&dir.join("edges.jsonl"), &edge_records)?;
        let manifest = GraphManifest {
            version: STORE_VERSION,
            dim,
            next_edge_seq: self.next_edge_seq,
            node_count: self.nodes.len(),
            edge_count: self.edges.len(),
        };
        std::fs::write(
            dir.join("graph.json"),
            serde_json::to_string(&manifest)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("graph.json");
        let raw = std::fs::read_to_string(&manifest_path)?;
        let manifest: GraphManifest =
            serde_json::from_str(&raw).map_err(|e| EngineError::CorruptStore {
                path: manifest_path.display().to_string(),
                reason: e.to_string(),
            })?;
        if manifest.version != STORE_VERSION {
            return Err(EngineError::VersionMismatch {
                expected: STORE_VERSION,
                found: manifest.version,
            });
        }
        let node_records: Vec<NodeRecord> = store::read_jsonl(&dir.join("nodes.jsonl"))?;
        let edge_records: Vec<EdgeRecord> = store::read_jsonl(&dir.join("edges.jsonl"))?;
        let mut sidecar = SidecarReader::open(&dir.join("graph.bin"), manifest.dim)?;

        let mut graph = KnowledgeGraph {
            next_edge_seq: manifest.next_edge_seq,
            ..Default::default()
        };
        for r in node_records {
            let embedding = Vector::new(sidecar.read_at(r.emb_offset)?)?;
            graph.adjacency.entry(r.id.clone()).or_default();
            graph.nodes.insert(
                r.id.clone(),
                EntityNode {
                    id: r.id,
                    name: r.name,
                    description: r.description,
                    chunk_ids: r.chunk_ids,
                    embedding,
                },
            );
        }
        for r in edge_records {
            let embedding = Vector::new(sidecar.read_at(r.emb_offset)?)?;
            for endpoint in [&r.source, &r.target] {
                if !graph.nodes.contains_key(endpoint) {
                    return Err(EngineError::CorruptStore {
                        path: dir.display().to_string(),
                        reason: format!("edge {} references missing node {endpoint}", r.id),
                    });
                }
            }
            graph
                .adjacency
                .entry(r.source.clone())
                .or_default()
                .insert(r.id.clone());
            graph
                .adjacency
                .entry(r.target.clone())
                .or_default()
                .insert(r.id.clone());
            graph.edges.insert(
                r.id.clone(),
                RelationEdge {
                    id: r.id,
                    source: r.source,
                    target: r.target,
                    description: r.description,
                    chunk_ids: r.chunk_ids,
                    embedding,
                },
            );
        }
        Ok(graph)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphManifest {
    version: u32,
    dim: usize,
    next_edge_seq: u64,
    node_count: usize,
    edge_count: usize,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: EntityId,
    name: String,
    description: String,
    chunk_ids: BTreeSet<ChunkId>,
    emb_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    id: EdgeId,
    source: EntityId,
    target: EntityId,
    description: String,
    chunk_ids: BTreeSet<ChunkId>,
    emb_offset: u64,
}

fn has_fragment(description: &str, fragment: &str) -> bool {
    description.split(FRAGMENT_SEP).any(|f| f == fragment)
}

fn append_fragment(description: &mut String, fragment: &str) {
    if description.is_empty() {
        description.push_str(fragment);
    } else {
        description.push(FRAGMENT_SEP);
        description.push_str(fragment);
    }
}

/// Knobs for the offline extraction pass.
pub struct ExtractionParams {
    /// Template with a `{{chunk_text}}` placeholder.
    pub prompt: String,
    /// Template with `{{entity_name}}` and `{{fragments}}` placeholders,
    /// used when a node accumulates too many description fragments.
    pub summarize_prompt: String,
    pub max_retries: u32,
    pub max_description_fragments: usize,
}

fn extraction_spec() -> BlockSpec {
    BlockSpec::new()
        .kind("ENTITY", &["name", "description"])
        .kind("RELATION", &["source", "target", "description"])
}

/// Marker a reply may use to state that a chunk holds nothing extractable.
const NO_ENTITIES_MARKER: &str = "NONE";

/// Builds the graph from chunks with an LLM extractor.
///
/// Unparseable replies are retried up to `max_retries` additional times,
/// then the chunk is skipped with a warning; a partial graph is valid.
/// Same-named entities across chunks unify into one node; every node and
/// edge records the chunks it was observed in and ends up embedded.
pub fn extract_graph(
    chunks: &[Chunk],
    llm: &dyn ChatProvider,
    embedder: &dyn EmbeddingProvider,
    params: &ExtractionParams,
) -> Result<KnowledgeGraph> {
    let mut graph = KnowledgeGraph::new();
    let spec = extraction_spec();

    for (chunk_idx, chunk) in chunks.iter().enumerate() {
        let prompt = params.prompt.replace("{{chunk_text}}", &chunk.text);
        let mut extracted = None;
        for _attempt in 0..=params.max_retries {
            let req = ChatRequest::new("extract", chunk_idx as u32, vec![ChatMessage::user(prompt.clone())]);
            let outcome = llm.chat(&req)?;
            let blocks = parse_blocks(&outcome.text, &spec);
            if blocks.is_empty() && !reply_declares_empty(&outcome.text) {
                log::warn!(
                    "extraction reply for chunk {} was unparseable; retrying",
                    chunk.id
                );
                continue;
            }
            extracted = Some(blocks);
            break;
        }
        let Some(blocks) = extracted else {
            log::warn!("skipping chunk {} after repeated unparseable extraction", chunk.id);
            continue;
        };

        let provenance: BTreeSet<ChunkId> = [chunk.id.clone()].into();
        for block in blocks {
            match block.kind.as_str() {
                "ENTITY" => {
                    let Some(name) = block.get("name").filter(|n| !n.is_empty()) else {
                        log::warn!("dropping ENTITY block without a name in chunk {}", chunk.id);
                        continue;
                    };
                    let description = block.get("description").unwrap_or("");
                    graph.ensure_node(name, description, &provenance, embedder)?;
                    maybe_summarize(
                        &mut graph,
                        &normalize_entity_name(name),
                        chunk_idx as u32,
                        llm,
                        embedder,
                        params,
                    )?;
                }
                "RELATION" => {
                    let (Some(source), Some(target)) = (block.get("source"), block.get("target"))
                    else {
                        log::warn!("dropping RELATION block missing endpoints in chunk {}", chunk.id);
                        continue;
                    };
                    if source.is_empty() || target.is_empty() {
                        continue;
                    }
                    // Endpoints observed in this chunk share its provenance.
                    graph.ensure_node(source, "", &provenance, embedder)?;
                    graph.ensure_node(target, "", &provenance, embedder)?;
                    graph.add_relation(
                        &RelationSpec {
                            source_name: source.to_string(),
                            target_name: target.to_string(),
                            description: block.get("description").unwrap_or("").to_string(),
                            chunk_ids: provenance.clone(),
                        },
                        embedder,
                    )?;
                }
                _ => {}
            }
        }
    }
    Ok(graph)
}

fn reply_declares_empty(text: &str) -> bool {
    text.lines().any(|l| l.trim() == NO_ENTITIES_MARKER) || text.trim().is_empty()
}

fn maybe_summarize(
    graph: &mut KnowledgeGraph,
    id: &EntityId,
    step: u32,
    llm: &dyn ChatProvider,
    embedder: &dyn EmbeddingProvider,
    params: &ExtractionParams,
) -> Result<()> {
    let Some(node) = graph.nodes.get(id) else {
        return Ok(());
    };
    if node.description_fragments() <= params.max_description_fragments {
        return Ok(());
    }
    let prompt = params
        .summarize_prompt
        .replace("{{entity_name}}", &node.name)
        .replace("{{fragments}}", &node.description);
    let req = ChatRequest::new("summarize", step, vec![ChatMessage::user(prompt)]);
    let summary = llm.chat(&req)?.text.trim().to_string();
    if summary.is_empty() {
        return Ok(());
    }
    let node = graph.nodes.get_mut(id).expect("checked above");
    node.description = summary;
    let text = node.embed_text();
    graph.nodes.get_mut(id).expect("checked").embedding = embedder.embed_one(&text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ScriptedEmbedder;
    use crate::llm::{ChatFixture, ScriptedChatProvider};

    fn embedder() -> ScriptedEmbedder {
        ScriptedEmbedder::new(4, true)
    }

    fn params() -> ExtractionParams {
        ExtractionParams {
            prompt: "extract from: {{chunk_text}}".into(),
            summarize_prompt: "summarize {{entity_name}}: {{fragments}}".into(),
            max_retries: 2,
            max_description_fragments: 8,
        }
    }

    fn chunk(id: usize, text: &str) -> Chunk {
        Chunk {
            id: format!("d:{}-{}", id * 10, id * 10 + 10),
            doc_id: "d".into(),
            text: text.into(),
            token_start: id * 10,
            token_end: id * 10 + 10,
            embedding: None,
        }
    }

    fn fixture(step: u32, response: &str) -> ChatFixture {
        ChatFixture {
            tag: "extract".into(),
            step,
            seq: 0,
            response: response.into(),
        }
    }

    #[test]
    fn normalization_folds_case_and_whitespace() {
        assert_eq!(normalize_entity_name("  John   Carter "), "john carter");
        assert_eq!(normalize_entity_name("ISSUS"), "issus");
    }

    #[test]
    fn empty_extraction_yields_empty_graph() {
        let chunks = vec![chunk(0, "nothing here"), chunk(1, "still nothing")];
        let llm = ScriptedChatProvider::new(vec![fixture(0, "NONE"), fixture(1, "NONE")]);
        let g = extract_graph(&chunks, &llm, &embedder(), &params()).unwrap();
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.edge_count(), 0);
    }

    fn two_chunk_fixture() -> (Vec<Chunk>, Vec<ChatFixture>) {
        let chunks = vec![chunk(0, "A knows B"), chunk(1, "B hires C")];
        let fixtures = vec![
            fixture(
                0,
                "ENTITY\nname: A\ndescription: first\nEND\n\
                 ENTITY\nname: B\ndescription: second\nEND\n\
                 RELATION\nsource: A\ntarget: B\ndescription: knows\nEND\n",
            ),
            fixture(
                1,
                "ENTITY\nname: B\ndescription: seen again\nEND\n\
                 ENTITY\nname: C\ndescription: third\nEND\n\
                 RELATION\nsource: B\ntarget: C\ndescription: hires\nEND\n",
            ),
        ];
        (chunks, fixtures)
    }

    #[test]
    fn scripted_extraction_builds_expected_graph() {
        let (chunks, fixtures) = two_chunk_fixture();
        let llm = ScriptedChatProvider::new(fixtures);
        let g = extract_graph(&chunks, &llm, &embedder(), &params()).unwrap();

        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 2);
        // Provenance computed by hand from the fixture.
        let c0 = &chunks[0].id;
        let c1 = &chunks[1].id;
        assert_eq!(g.node("a").unwrap().chunk_ids, [c0.clone()].into());
        assert_eq!(g.node("b").unwrap().chunk_ids, [c0.clone(), c1.clone()].into());
        assert_eq!(g.node("c").unwrap().chunk_ids, [c1.clone()].into());
        // Cross-chunk unification concatenates descriptions.
        assert_eq!(g.node("b").unwrap().description, "second\nseen again");
        assert!(g.integrity_violations().is_empty());
    }

    #[test]
    fn extraction_is_deterministic_under_scripted_llm() {
        let (chunks, fixtures) = two_chunk_fixture();
        let a = extract_graph(
            &chunks,
            &ScriptedChatProvider::new(fixtures.clone()),
            &embedder(),
            &params(),
        )
        .unwrap();
        let b = extract_graph(
            &chunks,
            &ScriptedChatProvider::new(fixtures),
            &embedder(),
            &params(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unparseable_chunk_is_retried_then_skipped() {
        let chunks = vec![chunk(0, "bad chunk"), chunk(1, "good chunk")];
        let mut fixtures = vec![
            // Three garbage replies exhaust 1 try + 2 retries for chunk 0.
            ChatFixture { tag: "extract".into(), step: 0, seq: 0, response: "garbage".into() },
            ChatFixture { tag: "extract".into(), step: 0, seq: 1, response: "more garbage".into() },
            ChatFixture { tag: "extract".into(), step: 0, seq: 2, response: "still garbage".into() },
        ];
        fixtures.push(fixture(1, "ENTITY\nname: Solo\ndescription: only one\nEND\n"));
        let llm = ScriptedChatProvider::new(fixtures);
        let g = extract_graph(&chunks, &llm, &embedder(), &params()).unwrap();
        assert_eq!(g.node_count(), 1);
        assert!(g.contains_node("solo"));
    }

    #[test]
    fn retry_can_recover_a_chunk() {
        let chunks = vec![chunk(0, "flaky chunk")];
        let fixtures = vec![
            ChatFixture { tag: "extract".into(), step: 0, seq: 0, response: "garbage".into() },
            ChatFixture {
                tag: "extract".into(),
                step: 0,
                seq: 1,
                response: "ENTITY\nname: Phoenix\ndescription: recovered\nEND\n".into(),
            },
        ];
        let g = extract_graph(&chunks, &ScriptedChatProvider::new(fixtures), &embedder(), &params())
            .unwrap();
        assert!(g.contains_node("phoenix"));
    }

    #[test]
    fn neighbors_on_path_graph() {
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        g.upsert_node(
            "B",
            "middle",
            &BTreeSet::new(),
            &[
                RelationSpec {
                    source_name: "A".into(),
                    target_name: "B".into(),
                    description: "left".into(),
                    chunk_ids: BTreeSet::new(),
                },
                RelationSpec {
                    source_name: "B".into(),
                    target_name: "C".into(),
                    description: "right".into(),
                    chunk_ids: BTreeSet::new(),
                },
            ],
            &emb,
        )
        .unwrap();
        assert_eq!(g.neighbors("b").unwrap(), ["a".to_string(), "c".to_string()].into());
        assert_eq!(g.neighbors("a").unwrap(), ["b".to_string()].into());
        assert!(g.neighbors("zzz").is_err());
    }

    #[test]
    fn neighbors_isolated_node_is_empty() {
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        g.upsert_node("Loner", "alone", &BTreeSet::new(), &[], &emb).unwrap();
        assert!(g.neighbors("loner").unwrap().is_empty());
    }

    #[test]
    fn neighbors_matches_edge_scan_oracle_on_random_graph() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        let names: Vec<String> = (0..30).map(|i| format!("N{i}")).collect();
        for name in &names {
            g.upsert_node(name, "node", &BTreeSet::new(), &[], &emb).unwrap();
        }
        for _ in 0..60 {
            let a = rng.random_range(0..names.len());
            let b = rng.random_range(0..names.len());
            if a == b {
                continue;
            }
            g.add_relation(
                &RelationSpec {
                    source_name: names[a].clone(),
                    target_name: names[b].clone(),
                    description: format!("rel {a}-{b}"),
                    chunk_ids: BTreeSet::new(),
                },
                &emb,
            )
            .unwrap();
        }
        for name in &names {
            let id = normalize_entity_name(name);
            // Oracle: scan every edge.
            let mut expect = BTreeSet::new();
            for e in g.edges() {
                if e.source == id {
                    expect.insert(e.target.clone());
                }
                if e.target == id {
                    expect.insert(e.source.clone());
                }
            }
            assert_eq!(g.neighbors(&id).unwrap(), expect, "node {id}");
        }
    }

    #[test]
    fn upsert_existing_with_identical_content_is_idempotent() {
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        g.upsert_node("X", "desc", &BTreeSet::new(), &[], &emb).unwrap();
        let before = g.clone();
        g.upsert_node("X", "desc", &BTreeSet::new(), &[], &emb).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn upsert_new_node_forces_missing_endpoints() {
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        g.upsert_node(
            "X",
            "forced",
            &BTreeSet::new(),
            &[RelationSpec {
                source_name: "X".into(),
                target_name: "Y".into(),
                description: "linked".into(),
                chunk_ids: BTreeSet::new(),
            }],
            &emb,
        )
        .unwrap();
        assert!(g.contains_node("x"));
        assert!(g.contains_node("y"));
        assert_eq!(g.edge_count(), 1);
        assert!(g.node("y").unwrap().chunk_ids.is_empty());
        assert!(g.integrity_violations().is_empty());
    }

    #[test]
    fn random_upserts_match_set_union_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        let mut expected: BTreeSet<String> = BTreeSet::new();
        for i in 0..10 {
            let name = format!("Entity {}", rng.random_range(0..6));
            expected.insert(normalize_entity_name(&name));
            g.upsert_node(&name, &format!("round {i}"), &BTreeSet::new(), &[], &emb)
                .unwrap();
        }
        assert_eq!(g.node_ids(), expected);
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let (chunks, fixtures) = two_chunk_fixture();
        let g = extract_graph(&chunks, &ScriptedChatProvider::new(fixtures), &embedder(), &params())
            .unwrap();
        g.save(dir.path(), 4).unwrap();
        let back = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn empty_graph_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = KnowledgeGraph::new();
        g.save(dir.path(), 4).unwrap();
        assert_eq!(KnowledgeGraph::load(dir.path()).unwrap(), g);
    }

    #[test]
    fn load_rejects_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let g = KnowledgeGraph::new();
        g.save(dir.path(), 4).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("graph.json")).unwrap();
        std::fs::write(
            dir.path().join("graph.json"),
            manifest.replace("\"version\":1", "\"version\":99"),
        )
        .unwrap();
        assert!(matches!(
            KnowledgeGraph::load(dir.path()),
            Err(EngineError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn load_rejects_dangling_edge() {
        let dir = tempfile::tempdir().unwrap();
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        g.upsert_node(
            "A",
            "",
            &BTreeSet::new(),
            &[RelationSpec {
                source_name: "A".into(),
                target_name: "B".into(),
                description: "x".into(),
                chunk_ids: BTreeSet::new(),
            }],
            &emb,
        )
        .unwrap();
        g.save(dir.path(), 4).unwrap();
        // Drop node b from the record file to simulate corruption.
        let nodes = std::fs::read_to_string(dir.path().join("nodes.jsonl")).unwrap();
        let kept: Vec<&str> = nodes.lines().filter(|l| !l.contains("\"id\":\"b\"")).collect();
        std::fs::write(dir.path().join("nodes.jsonl"), kept.join("\n") + "\n").unwrap();
        assert!(KnowledgeGraph::load(dir.path()).is_err());
    }

    #[test]
    fn thousand_node_round_trip_is_byte_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        for i in 0..1000 {
            g.upsert_node(&format!("node {i}"), &format!("d{i}"), &BTreeSet::new(), &[], &emb)
                .unwrap();
        }
        for _ in 0..1500 {
            let a = rng.random_range(0..1000);
            let b = rng.random_range(0..1000);
            if a == b {
                continue;
            }
            g.add_relation(
                &RelationSpec {
                    source_name: format!("node {a}"),
                    target_name: format!("node {b}"),
                    description: format!("r{a}-{b}"),
                    chunk_ids: BTreeSet::new(),
                },
                &emb,
            )
            .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("first");
        let second = dir.path().join("second");
        g.save(&first, 4).unwrap();
        let reloaded = KnowledgeGraph::load(&first).unwrap();
        reloaded.save(&second, 4).unwrap();
        for file in ["graph.json", "nodes.jsonl", "edges.jsonl", "graph.bin"] {
            let a = std::fs::read(first.join(file)).unwrap();
            let b = std::fs::read(second.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs after reload");
        }
    }
}
