//! The hypergraph working memory.
//!
//! Vertices mirror graph entities; hyperedges are memory points — one
//! description over two or more entities. Memory evolves through three
//! operations: update (revise a description), insertion (new point), and
//! merging (two points collapse into a higher-order point whose vertex
//! set is the union of its parents'). Merged parents are retired but kept
//! for audit; `keep_merge_parents` leaves them live instead.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::ChunkId;
use crate::embedding::EmbeddingProvider;
use crate::error::{EngineError, Result};
use crate::graph::{normalize_entity_name, EntityId, KnowledgeGraph};

pub type PointId = String;

/// Name and description snapshot of the mirrored graph entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryVertex {
    pub entity_id: EntityId,
    pub entity_info: EntityInfo,
    pub chunk_ids: BTreeSet<ChunkId>,
}

/// A hyperedge: one memory point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPoint {
    pub id: PointId,
    pub description: String,
    pub vertex_ids: BTreeSet<EntityId>,
    /// Parent points when this point was produced by a merge.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lineage: Option<(PointId, PointId)>,
    pub created_step: u32,
    pub updated_step: u32,
}

/// One step's worth of proposed evolution operations. Applied in the
/// order updates, then insertions, then merges.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryDelta {
    pub updates: Vec<UpdateOp>,
    pub insertions: Vec<InsertOp>,
    pub merges: Vec<MergeOp>,
}

impl MemoryDelta {
    pub fn is_empty(&self) -> bool {
        self.updates.is_empty() && self.insertions.is_empty() && self.merges.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateOp {
    pub point_id: PointId,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertOp {
    pub description: String,
    pub vertex_names: Vec<String>,
    /// Chunk provenance per vertex name, from the evidence the insertion
    /// was grounded in.
    #[serde(default)]
    pub provenance: BTreeMap<String, BTreeSet<ChunkId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOp {
    pub left: PointId,
    pub right: PointId,
    pub description: String,
}

/// What `apply_delta` did: applied items (with assigned ids) and
/// rejections with reasons. Rejections never abort a step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub applied_updates: Vec<UpdateOp>,
    pub applied_insertions: Vec<AppliedInsert>,
    pub applied_merges: Vec<AppliedMerge>,
    pub rejected: Vec<RejectedOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedInsert {
    pub point_id: PointId,
    pub op: InsertOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedMerge {
    pub point_id: PointId,
    /// Parents actually merged, after any stale-id remapping.
    pub left: PointId,
    pub right: PointId,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedOp {
    pub kind: String,
    pub reason: String,
    pub detail: String,
}

/// The working memory `(V_M, E_M)` with live and retired hyperedges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryHypergraph {
    vertices: BTreeMap<EntityId, MemoryVertex>,
    points: BTreeMap<PointId, MemoryPoint>,
    retired: BTreeMap<PointId, MemoryPoint>,
    incidence: BTreeMap<EntityId, BTreeSet<PointId>>,
    /// Retired parent -> the merge child that absorbed it.
    successor: BTreeMap<PointId, PointId>,
    next_point_seq: u64,
    keep_merge_parents: bool,
    current_step: u32,
}

impl Default for MemoryHypergraph {
    fn default() -> Self {
        Self::new(false)
    }
}

impl MemoryHypergraph {
    pub fn new(keep_merge_parents: bool) -> Self {
        Self {
            vertices: BTreeMap::new(),
            points: BTreeMap::new(),
            retired: BTreeMap::new(),
            incidence: BTreeMap::new(),
            successor: BTreeMap::new(),
            next_point_seq: 0,
            keep_merge_parents,
            current_step: 0,
        }
    }

    /// Advances the step counter stamped onto created/updated points.
    pub fn set_step(&mut self, step: u32) {
        self.current_step = step;
    }

    pub fn current_step(&self) -> u32 {
        self.current_step
    }

    pub fn vertex_ids(&self) -> BTreeSet<EntityId> {
        self.vertices.keys().cloned().collect()
    }

    pub fn contains_vertex(&self, v: &str) -> bool {
        self.vertices.contains_key(v)
    }

    pub fn vertex(&self, v: &str) -> Option<&MemoryVertex> {
        self.vertices.get(v)
    }

    pub fn vertices(&self) -> impl Iterator<Item = &MemoryVertex> {
        self.vertices.values()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Live points only.
    pub fn points(&self) -> impl Iterator<Item = &MemoryPoint> {
        self.points.values()
    }

    pub fn live_count(&self) -> usize {
        self.points.len()
    }

    pub fn point(&self, id: &str) -> Option<&MemoryPoint> {
        self.points.get(id)
    }

    pub fn retired_point(&self, id: &str) -> Option<&MemoryPoint> {
        self.retired.get(id)
    }

    pub fn retired_points(&self) -> impl Iterator<Item = &MemoryPoint> {
        self.retired.values()
    }

    pub fn is_live(&self, id: &str) -> bool {
        self.points.contains_key(id)
    }

    pub fn incidence(&self, v: &str) -> BTreeSet<PointId> {
        self.incidence.get(v).cloned().unwrap_or_default()
    }

    /// Follows merge lineage from a possibly-retired point down to the
    /// live descendant, if one exists.
    pub fn live_descendant(&self, id: &str) -> Option<&MemoryPoint> {
        let mut current = id.to_string();
        for _ in 0..=self.successor.len() {
            if let Some(p) = self.points.get(&current) {
                return Some(p);
            }
            match self.successor.get(&current) {
                Some(next) => current = next.clone(),
                None => return None,
            }
        }
        None
    }

    fn next_point_id(&mut self) -> PointId {
        let id = format!("p{}", self.next_point_seq);
        self.next_point_seq += 1;
        id
    }

    /// Revises a live point's description. Subordinate entities never
    /// change through updates.
    pub fn apply_update(&mut self, point_id: &str, new_description: &str) -> Result<()> {
        if self.retired.contains_key(point_id) {
            return Err(EngineError::RetiredPoint(point_id.to_string()));
        }
        let point = self
            .points
            .get_mut(point_id)
            .ok_or_else(|| EngineError::UnknownPoint(point_id.to_string()))?;
        point.description = new_description.to_string();
        point.updated_step = self.current_step;
        Ok(())
    }

    /// Creates a new memory point over `vertex_names`, admitting missing
    /// vertices into memory and forcing missing entities into the graph.
    pub fn apply_insert(
        &mut self,
        graph: &mut KnowledgeGraph,
        embedder: &dyn EmbeddingProvider,
        description: &str,
        vertex_names: &[String],
        provenance: &BTreeMap<String, BTreeSet<ChunkId>>,
    ) -> Result<PointId> {
        if description.is_empty() {
            return Err(EngineError::Parse("insertion with empty description".into()));
        }
        let mut ids: BTreeMap<EntityId, String> = BTreeMap::new();
        for name in vertex_names {
            let id = normalize_entity_name(name);
            if !id.is_empty() {
                ids.entry(id).or_insert_with(|| name.clone());
            }
        }
        if ids.len() < 2 {
            return Err(EngineError::DegenerateHyperedge(ids.len()));
        }

        let mut vertex_ids = BTreeSet::new();
        for (id, name) in ids {
            let extra: BTreeSet<ChunkId> = provenance.get(&name).cloned().unwrap_or_default();
            self.admit_vertex(graph, embedder, &name, &extra)?;
            vertex_ids.insert(id);
        }

        let point_id = self.next_point_id();
        let point = MemoryPoint {
            id: point_id.clone(),
            description: description.to_string(),
            vertex_ids: vertex_ids.clone(),
            lineage: None,
            created_step: self.current_step,
            updated_step: self.current_step,
        };
        for v in &vertex_ids {
            self.incidence.entry(v.clone()).or_default().insert(point_id.clone());
        }
        self.points.insert(point_id.clone(), point);
        Ok(point_id)
    }

    /// Admits an entity into memory, forcing it into the graph first when
    /// absent there. Provenance is copied from the graph node on first
    /// admission and only ever extended afterwards.
    fn admit_vertex(
        &mut self,
        graph: &mut KnowledgeGraph,
        embedder: &dyn EmbeddingProvider,
        name: &str,
        extra_chunks: &BTreeSet<ChunkId>,
    ) -> Result<EntityId> {
        let id = if let Some(node) = graph.node(&normalize_entity_name(name)) {
            node.id.clone()
        } else {
            graph.upsert_node(name, "", &BTreeSet::new(), &[], embedder)?
        };
        match self.vertices.get_mut(&id) {
            Some(vertex) => {
                vertex.chunk_ids.extend(extra_chunks.iter().cloned());
            }
            None => {
                let node = graph.node(&id).expect("just ensured");
                let mut chunk_ids = node.chunk_ids.clone();
                chunk_ids.extend(extra_chunks.iter().cloned());
                self.vertices.insert(
                    id.clone(),
                    MemoryVertex {
                        entity_id: id.clone(),
                        entity_info: EntityInfo {
                            name: node.name.clone(),
                            description: node.description.clone(),
                        },
                        chunk_ids,
                    },
                );
                self.incidence.entry(id.clone()).or_default();
            }
        }
        Ok(id)
    }

    /// Merges two live points into a higher-order point whose vertex set
    /// is the union of its parents'. Parents retire unless the memory
    /// keeps them live for the literal reading.
    pub fn apply_merge(
        &mut self,
        left: &str,
        right: &str,
        merged_description: &str,
    ) -> Result<PointId> {
        if left == right {
            return Err(EngineError::SelfMerge(left.to_string()));
        }
        if merged_description.is_empty() {
            return Err(EngineError::Parse("merge with empty description".into()));
        }
        for id in [left, right] {
            if self.retired.contains_key(id) {
                return Err(EngineError::RetiredPoint(id.to_string()));
            }
            if !self.points.contains_key(id) {
                return Err(EngineError::UnknownPoint(id.to_string()));
            }
        }

        let union: BTreeSet<EntityId> = self.points[left]
            .vertex_ids
            .union(&self.points[right].vertex_ids)
            .cloned()
            .collect();

        let child_id = self.next_point_id();
        let child = MemoryPoint {
            id: child_id.clone(),
            description: merged_description.to_string(),
            vertex_ids: union.clone(),
            lineage: Some((left.to_string(), right.to_string())),
            created_step: self.current_step,
            updated_step: self.current_step,
        };

        if !self.keep_merge_parents {
            for parent_id in [left, right] {
                let parent = self.points.remove(parent_id).expect("checked live");
                for v in &parent.vertex_ids {
                    if let Some(inc) = self.incidence.get_mut(v) {
                        inc.remove(parent_id);
                    }
                }
                self.successor.insert(parent_id.to_string(), child_id.clone());
                self.retired.insert(parent_id.to_string(), parent);
            }
        }

        for v in &union {
            self.incidence.entry(v.clone()).or_default().insert(child_id.clone());
        }
        self.points.insert(child_id.clone(), child);
        Ok(child_id)
    }

    /// Applies a whole delta in contract order (updates, insertions,
    /// merges). Invalid items are reported and skipped; nothing aborts
    /// the step. Merge references to points retired earlier in the same
    /// delta are remapped to their live descendant.
    pub fn apply_delta(
        &mut self,
        graph: &mut KnowledgeGraph,
        embedder: &dyn EmbeddingProvider,
        delta: &MemoryDelta,
    ) -> DeltaReport {
        let mut report = DeltaReport::default();

        for update in &delta.updates {
            match self.apply_update(&update.point_id, &update.description) {
                Ok(()) => report.applied_updates.push(update.clone()),
                Err(e) => report.rejected.push(RejectedOp {
                    kind: "update".into(),
                    reason: e.to_string(),
                    detail: update.point_id.clone(),
                }),
            }
        }

        for insert in &delta.insertions {
            match self.apply_insert(
                graph,
                embedder,
                &insert.description,
                &insert.vertex_names,
                &insert.provenance,
            ) {
                Ok(point_id) => report.applied_insertions.push(AppliedInsert {
                    point_id,
                    op: insert.clone(),
                }),
                Err(e) => report.rejected.push(RejectedOp {
                    kind: "insert".into(),
                    reason: e.to_string(),
                    detail: insert.description.clone(),
                }),
            }
        }

        for merge in &delta.merges {
            let left = self.remap_to_live(&merge.left);
            let right = self.remap_to_live(&merge.right);
            match self.apply_merge(&left, &right, &merge.description) {
                Ok(point_id) => report.applied_merges.push(AppliedMerge {
                    point_id,
                    left,
                    right,
                    description: merge.description.clone(),
                }),
                Err(e) => report.rejected.push(RejectedOp {
                    kind: "merge".into(),
                    reason: e.to_string(),
                    detail: format!("{} + {}", merge.left, merge.right),
                }),
            }
        }

        report
    }

    fn remap_to_live(&self, id: &str) -> PointId {
        match self.live_descendant(id) {
            Some(p) => p.id.clone(),
            None => id.to_string(),
        }
    }

    /// Mean number of entities per live hyperedge; 0 for empty memory.
    pub fn avg_entities_per_hyperedge(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let total: usize = self.points.values().map(|p| p.vertex_ids.len()).sum();
        total as f64 / self.points.len() as f64
    }

    /// Entities co-occurring with `v` in at least one live point.
    pub fn memory_neighbors(&self, v: &str) -> Result<BTreeSet<EntityId>> {
        if !self.vertices.contains_key(v) {
            return Err(EngineError::UnknownEntity(v.to_string()));
        }
        let mut out = BTreeSet::new();
        if let Some(point_ids) = self.incidence.get(v) {
            for pid in point_ids {
                for other in &self.points[pid].vertex_ids {
                    if other != v {
                        out.insert(other.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Union of chunk provenance over all memory vertices.
    pub fn chunk_provenance(&self) -> BTreeSet<ChunkId> {
        self.vertices
            .values()
            .flat_map(|v| v.chunk_ids.iter().cloned())
            .collect()
    }

    /// Deterministic text form fed to prompts: points ordered by creation
    /// step then id, followed by the entity roster.
    pub fn render(&self) -> String {
        if self.points.is_empty() && self.vertices.is_empty() {
            return EMPTY_MEMORY_SENTINEL.to_string();
        }
        let mut out = String::new();
        out.push_str("MEMORY POINTS:\n");
        if self.points.is_empty() {
            out.push_str("(none)\n");
        } else {
            let mut ordered: Vec<&MemoryPoint> = self.points.values().collect();
            ordered.sort_by(|a, b| a.created_step.cmp(&b.created_step).then(a.id.cmp(&b.id)));
            for p in ordered {
                let names: Vec<&str> = p
                    .vertex_ids
                    .iter()
                    .map(|v| {
                        self.vertices
                            .get(v)
                            .map(|mv| mv.entity_info.name.as_str())
                            .unwrap_or(v.as_str())
                    })
                    .collect();
                out.push_str(&format!("[{}] entities: {}\n", p.id, names.join(" | ")));
                out.push_str(&format!("    {}\n", p.description.replace('\n', "\n    ")));
            }
        }
        out.push_str("ENTITIES:\n");
        if self.vertices.is_empty() {
            out.push_str("(none)\n");
        } else {
            for v in self.vertices.values() {
                if v.entity_info.description.is_empty() {
                    out.push_str(&format!("- {}\n", v.entity_info.name));
                } else {
                    out.push_str(&format!(
                        "- {}: {}\n",
                        v.entity_info.name,
                        v.entity_info.description.replace('\n', " ")
                    ));
                }
            }
        }
        out
    }

    /// Structural invariant check against the backing graph. Returns
    /// human-readable violations; empty means sound.
    pub fn invariant_violations(&self, graph: &KnowledgeGraph) -> Vec<String> {
        let mut out = Vec::new();

        // V_M subset of V_G.
        for v in self.vertices.keys() {
            if !graph.contains_node(v) {
                out.push(format!("memory vertex {v} missing from graph"));
            }
        }

        // Live points: arity, membership, non-empty descriptions.
        for p in self.points.values() {
            if p.vertex_ids.len() < 2 {
                out.push(format!("live point {} has arity {}", p.id, p.vertex_ids.len()));
            }
            if p.description.is_empty() {
                out.push(format!("live point {} has empty description", p.id));
            }
            for v in &p.vertex_ids {
                if !self.vertices.contains_key(v) {
                    out.push(format!("point {} references unknown vertex {v}", p.id));
                }
            }
            if let Some((a, b)) = &p.lineage {
                for parent in [a, b] {
                    let in_retired = self.retired.contains_key(parent);
                    let in_live = self.points.contains_key(parent);
                    if self.keep_merge_parents {
                        if !in_live && !in_retired {
                            out.push(format!("point {} lineage parent {parent} unknown", p.id));
                        }
                    } else if !in_retired {
                        out.push(format!(
                            "point {} lineage parent {parent} is not retired",
                            p.id
                        ));
                    }
                }
                // Merge-union correctness.
                let (la, lb) = (self.lookup_any(a), self.lookup_any(b));
                if let (Some(pa), Some(pb)) = (la, lb) {
                    let union: BTreeSet<EntityId> =
                        pa.vertex_ids.union(&pb.vertex_ids).cloned().collect();
                    if union != p.vertex_ids {
                        out.push(format!("point {} vertex set is not its parents' union", p.id));
                    }
                }
            }
        }

        // Incidence soundness, both directions.
        for (v, pids) in &self.incidence {
            for pid in pids {
                match self.points.get(pid) {
                    None => out.push(format!("incidence of {v} references non-live point {pid}")),
                    Some(p) if !p.vertex_ids.contains(v) => {
                        out.push(format!("incidence of {v} lists point {pid} not containing it"))
                    }
                    _ => {}
                }
            }
        }
        for p in self.points.values() {
            for v in &p.vertex_ids {
                if !self.incidence.get(v).is_some_and(|s| s.contains(&p.id)) {
                    out.push(format!("vertex {v} missing incidence for point {}", p.id));
                }
            }
        }

        // Lineage acyclicity over live + retired.
        if self.lineage_has_cycle() {
            out.push("lineage relation contains a cycle".into());
        }

        out
    }

    fn lookup_any(&self, id: &str) -> Option<&MemoryPoint> {
        self.points.get(id).or_else(|| self.retired.get(id))
    }

    fn lineage_has_cycle(&self) -> bool {
        // Walk parents from every point; the id space is tiny.
        let all: BTreeMap<&PointId, &MemoryPoint> =
            self.points.iter().chain(self.retired.iter()).map(|(k, v)| (k, v)).collect();
        for start in all.keys() {
            let mut seen = BTreeSet::new();
            let mut stack = vec![(*start).clone()];
            while let Some(id) = stack.pop() {
                if !seen.insert(id.clone()) {
                    return true;
                }
                if let Some(p) = all.get(&id) {
                    if let Some((a, b)) = &p.lineage {
                        stack.push(a.clone());
                        stack.push(b.clone());
                    }
                }
            }
        }
        false
    }
}

pub const EMPTY_MEMORY_SENTINEL: &str = "(memory is empty)\n";

/// Memory snapshot as line records, mirroring the graph's record style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemoryRecord {
    Meta {
        next_point_seq: u64,
        keep_merge_parents: bool,
        current_step: u32,
    },
    Vertex(MemoryVertex),
    Point(MemoryPoint),
    Retired(MemoryPoint),
}

/// Serializes a memory into snapshot records with deterministic order.
pub fn snapshot_records(m: &MemoryHypergraph) -> Vec<MemoryRecord> {
    let mut records = vec![MemoryRecord::Meta {
        next_point_seq: m.next_point_seq,
        keep_merge_parents: m.keep_merge_parents,
        current_step: m.current_step,
    }];
    records.extend(m.vertices.values().cloned().map(MemoryRecord::Vertex));
    records.extend(m.points.values().cloned().map(MemoryRecord::Point));
    records.extend(m.retired.values().cloned().map(MemoryRecord::Retired));
    records
}

/// Rebuilds a memory from snapshot records, recomputing incidence and the
/// successor map from lineage.
pub fn from_snapshot_records(records: &[MemoryRecord]) -> Result<MemoryHypergraph> {
    let mut m = MemoryHypergraph::new(false);
    for record in records {
        match record {
            MemoryRecord::Meta {
                next_point_seq,
                keep_merge_parents,
                current_step,
            } => {
                m.next_point_seq = *next_point_seq;
                m.keep_merge_parents = *keep_merge_parents;
                m.current_step = *current_step;
            }
            MemoryRecord::Vertex(v) => {
                m.incidence.entry(v.entity_id.clone()).or_default();
                m.vertices.insert(v.entity_id.clone(), v.clone());
            }
            MemoryRecord::Point(p) => {
                for v in &p.vertex_ids {
                    m.incidence.entry(v.clone()).or_default().insert(p.id.clone());
                }
                m.points.insert(p.id.clone(), p.clone());
            }
            MemoryRecord::Retired(p) => {
                m.retired.insert(p.id.clone(), p.clone());
            }
        }
    }
    for point in m.points.values().chain(m.retired.values()) {
        if let Some((a, b)) = &point.lineage {
            for parent in [a, b] {
                if m.retired.contains_key(parent) {
                    m.successor.insert(parent.clone(), point.id.clone());
                }
            }
        }
    }
    Ok(m)
}
