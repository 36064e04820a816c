//! Evidence retrieval: entity retrieval over candidate sets, anchored
//! local investigation, global exploration over unexplored entities, and
//! capped evidence gathering.
//!
//! All operations read frozen snapshots of the graph, index, and memory;
//! nothing here mutates state.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, ChunkId, ChunkStore};
use crate::embedding::{cosine_similarity, top_k, EmbeddingProvider, Vector, VectorIndex};
use crate::error::{EngineError, Result};
use crate::graph::{EdgeId, EntityId, EntityNode, KnowledgeGraph, RelationEdge};
use crate::memory::{MemoryHypergraph, PointId};

/// How a subquery scopes its candidate entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubqueryMode {
    /// Anchored to one memory point; searches the 1-hop neighborhood of
    /// its subordinate entities.
    Local,
    /// Searches all graph entities not yet in memory.
    Global,
}

/// A retrieval intent generated mid-session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subquery {
    pub text: String,
    pub mode: SubqueryMode,
    /// Required for local mode: the anchoring memory point.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub anchor_point: Option<PointId>,
    pub origin_step: u32,
}

impl Subquery {
    pub fn global(text: impl Into<String>, origin_step: u32) -> Self {
        Self {
            text: text.into(),
            mode: SubqueryMode::Global,
            anchor_point: None,
            origin_step,
        }
    }

    pub fn local(text: impl Into<String>, anchor: PointId, origin_step: u32) -> Self {
        Self {
            text: text.into(),
            mode: SubqueryMode::Local,
            anchor_point: Some(anchor),
            origin_step,
        }
    }
}

/// What one subquery retrieved: entity snapshots plus their capped
/// relations and chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub entities: Vec<EntityNode>,
    pub relations: Vec<RelationEdge>,
    pub chunks: Vec<Chunk>,
    pub subquery: Subquery,
}

impl Evidence {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// Union over queries of the per-query top-`n_v` cosine matches within
/// `candidates`. An empty candidate set yields an empty result.
pub fn retrieve_entities(
    embedder: &dyn EmbeddingProvider,
    index: &VectorIndex,
    queries: &[String],
    candidates: &BTreeSet<EntityId>,
    n_v: usize,
) -> Result<BTreeSet<EntityId>> {
    if queries.is_empty() || candidates.is_empty() {
        return Ok(BTreeSet::new());
    }
    let query_vectors = embedder.embed(queries)?;
    let mut out = BTreeSet::new();
    for qv in &query_vectors {
        out.extend(top_k(qv, candidates, index, n_v)?);
    }
    Ok(out)
}

/// The Eq.-5 style 1-hop neighborhood of a point's vertices: memory
/// co-members unioned with graph neighbors, minus the anchor vertices
/// themselves (they are already in memory).
pub fn anchor_neighborhood(
    anchor_vertices: &BTreeSet<EntityId>,
    m: &MemoryHypergraph,
    g: &KnowledgeGraph,
) -> Result<BTreeSet<EntityId>> {
    let mut candidates = BTreeSet::new();
    for v in anchor_vertices {
        candidates.extend(m.memory_neighbors(v)?);
        candidates.extend(g.neighbors(v)?);
    }
    for v in anchor_vertices {
        candidates.remove(v);
    }
    Ok(candidates)
}

/// Local investigation: entity retrieval within the anchor's 1-hop
/// neighborhood. An anchor retired by a merge remaps to its live
/// descendant; an unresolvable anchor is a stale-anchor error so the
/// orchestrator can regenerate the subquery.
pub fn local_investigation(
    embedder: &dyn EmbeddingProvider,
    index: &VectorIndex,
    q: &Subquery,
    m: &MemoryHypergraph,
    g: &KnowledgeGraph,
    n_v: usize,
) -> Result<BTreeSet<EntityId>> {
    debug_assert_eq!(q.mode, SubqueryMode::Local);
    let anchor_id = q
        .anchor_point
        .as_deref()
        .ok_or_else(|| EngineError::StaleAnchor("<missing anchor>".into()))?;
    let anchor = m
        .live_descendant(anchor_id)
        .ok_or_else(|| EngineError::StaleAnchor(anchor_id.to_string()))?;
    let candidates = anchor_neighborhood(&anchor.vertex_ids.clone(), m, g)?;
    retrieve_entities(embedder, index, std::slice::from_ref(&q.text), &candidates, n_v)
}

/// Global exploration: entity retrieval over `V_G \ V_M`. Returns empty
/// when memory already covers the whole graph.
pub fn global_exploration(
    embedder: &dyn EmbeddingProvider,
    index: &VectorIndex,
    q: &Subquery,
    m: &MemoryHypergraph,
    g: &KnowledgeGraph,
    n_v: usize,
) -> Result<BTreeSet<EntityId>> {
    let memory_vertices = m.vertex_ids();
    let candidates: BTreeSet<EntityId> =
        g.node_ids().difference(&memory_vertices).cloned().collect();
    retrieve_entities(embedder, index, std::slice::from_ref(&q.text), &candidates, n_v)
}

/// Collects the relations incident to the retrieved entities and the
/// chunks in their provenance, ranks each pool by similarity to the
/// subquery text, and truncates to `n_e` and `n_d`.
pub fn gather_evidence(
    embedder: &dyn EmbeddingProvider,
    g: &KnowledgeGraph,
    chunk_store: &ChunkStore,
    entity_ids: &BTreeSet<EntityId>,
    subquery: &Subquery,
    n_e: usize,
    n_d: usize,
) -> Result<Evidence> {
    let mut entities = Vec::with_capacity(entity_ids.len());
    for id in entity_ids {
        let node = g
            .node(id)
            .ok_or_else(|| EngineError::UnknownEntity(id.clone()))?;
        entities.push(node.clone());
    }

    if entities.is_empty() {
        return Ok(Evidence {
            entities,
            relations: Vec::new(),
            chunks: Vec::new(),
            subquery: subquery.clone(),
        });
    }

    let query_vector = embedder.embed_one(&subquery.text)?;

    // Deduped edge pool over all incident edges.
    let mut edge_ids: BTreeSet<EdgeId> = BTreeSet::new();
    for id in entity_ids {
        edge_ids.extend(g.incident_edges(id));
    }
    let relations = rank_and_truncate(
        edge_ids.iter().map(|eid| {
            let e = g.edge(eid).expect("incident edge exists");
            (eid.clone(), &e.embedding, e.clone())
        }),
        &query_vector,
        n_e,
    )?;

    // Deduped chunk pool over the entities' provenance.
    let mut chunk_ids: BTreeSet<ChunkId> = BTreeSet::new();
    for node in &entities {
        chunk_ids.extend(node.chunk_ids.iter().cloned());
    }
    let mut chunk_pool = Vec::new();
    for cid in &chunk_ids {
        match chunk_store.get(cid) {
            Some(chunk) => {
                let Some(embedding) = &chunk.embedding else {
                    log::warn!("chunk {cid} has no embedding; skipping from evidence");
                    continue;
                };
                chunk_pool.push((cid.clone(), embedding, chunk.clone()));
            }
            None => log::warn!("provenance chunk {cid} missing from store; skipping"),
        }
    }
    let chunks = rank_and_truncate(chunk_pool.into_iter(), &query_vector, n_d)?;

    Ok(Evidence {
        entities,
        relations,
        chunks,
        subquery: subquery.clone(),
    })
}

/// Ranks items by descending cosine to the query, ties by ascending id,
/// then truncates.
pub fn rank_and_truncate<'a, T>(
    pool: impl Iterator<Item = (String, &'a Vector, T)>,
    query: &Vector,
    cap: usize,
) -> Result<Vec<T>> {
    let mut scored: Vec<(f64, String, T)> = Vec::new();
    for (id, embedding, item) in pool {
        scored.push((cosine_similarity(query, embedding)?, id, item));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(cap).map(|(_, _, item)| item).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Chunk;
    use crate::embedding::ScriptedEmbedder;
    use crate::graph::RelationSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    const DIM: usize = 6;

    fn embedder() -> ScriptedEmbedder {
        ScriptedEmbedder::new(DIM, true)
    }

    fn entity_index(g: &KnowledgeGraph) -> VectorIndex {
        let mut idx = VectorIndex::new(DIM);
        for node in g.nodes() {
            idx.insert(node.id.clone(), node.embedding.clone()).unwrap();
        }
        idx
    }

    fn random_graph(rng: &mut ChaCha8Rng, n_nodes: usize, n_edges: usize) -> KnowledgeGraph {
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        for i in 0..n_nodes {
            g.upsert_node(&format!("ent {i:02}"), &format!("about {i}"), &BTreeSet::new(), &[], &emb)
                .unwrap();
        }
        for _ in 0..n_edges {
            let a = rng.random_range(0..n_nodes);
            let b = rng.random_range(0..n_nodes);
            if a == b {
                continue;
            }
            g.add_relation(
                &RelationSpec {
                    source_name: format!("ent {a:02}"),
                    target_name: format!("ent {b:02}"),
                    description: format!("link {a}-{b}"),
                    chunk_ids: BTreeSet::new(),
                },
                &emb,
            )
            .unwrap();
        }
        g
    }

    #[test]
    fn retrieve_entities_empty_queries_yield_empty_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&mut rng, 5, 4);
        let idx = entity_index(&g);
        let got = retrieve_entities(&embedder(), &idx, &[], &g.node_ids(), 3).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn retrieve_entities_exhausts_single_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(&mut rng, 3, 0);
        let idx = entity_index(&g);
        let candidates: BTreeSet<EntityId> = ["ent 00".to_string()].into();
        let got = retrieve_entities(
            &embedder(),
            &idx,
            &["anything".to_string()],
            &candidates,
            3,
        )
        .unwrap();
        assert_eq!(got, candidates);
    }

    #[test]
    fn retrieve_entities_matches_per_query_sort_union_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 40, 0);
        let idx = entity_index(&g);
        let emb = embedder();
        let queries: Vec<String> = (0..3).map(|i| format!("query number {i}")).collect();
        let candidates = g.node_ids();
        let n_v = 5;

        let got = retrieve_entities(&emb, &idx, &queries, &candidates, n_v).unwrap();

        // Oracle: full sort per query, take n_v, union.
        let mut expect = BTreeSet::new();
        for q in &queries {
            let qv = emb.embed_one(q).unwrap();
            let mut scored: Vec<(f64, EntityId)> = candidates
                .iter()
                .map(|id| {
                    (
                        cosine_similarity(&qv, idx.get(id).unwrap()).unwrap(),
                        id.clone(),
                    )
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            expect.extend(scored.into_iter().take(n_v).map(|(_, id)| id));
        }
        assert_eq!(got, expect);
        assert!(got.len() <= queries.len() * n_v);
    }

    #[test]
    fn retrieve_entities_union_is_monotone_in_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(&mut rng, 25, 0);
        let idx = entity_index(&g);
        let emb = embedder();
        let q1: Vec<String> = vec!["alpha".into(), "beta".into()];
        let q2: Vec<String> = vec!["alpha".into(), "beta".into(), "gamma".into()];
        let r1 = retrieve_entities(&emb, &idx, &q1, &g.node_ids(), 4).unwrap();
        let r2 = retrieve_entities(&emb, &idx, &q2, &g.node_ids(), 4).unwrap();
        assert!(r1.is_subset(&r2));
    }

    fn memory_with_point(
        g: &mut KnowledgeGraph,
        names: &[&str],
    ) -> (MemoryHypergraph, PointId) {
        let emb = embedder();
        let mut m = MemoryHypergraph::new(false);
        let pid = m
            .apply_insert(
                g,
                &emb,
                "anchor point",
                &names.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                &BTreeMap::new(),
            )
            .unwrap();
        (m, pid)
    }

    #[test]
    fn local_investigation_empty_neighborhood_yields_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = random_graph(&mut rng, 6, 0); // no edges at all
        let (m, pid) = memory_with_point(&mut g, &["ent 00", "ent 01"]);
        let idx = entity_index(&g);
        let q = Subquery::local("isolated", pid, 1);
        let got = local_investigation(&embedder(), &idx, &q, &m, &g, 5).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn local_investigation_follows_graph_edges() {
        let emb = embedder();
        let mut g = KnowledgeGraph::new();
        g.upsert_node(
            "A",
            "",
            &BTreeSet::new(),
            &[RelationSpec {
                source_name: "A".into(),
                target_name: "B".into(),
                description: "ab".into(),
                chunk_ids: BTreeSet::new(),
            }],
            &emb,
        )
        .unwrap();
        g.upsert_node("C", "", &BTreeSet::new(), &[], &emb).unwrap();
        let (m, pid) = memory_with_point(&mut g, &["A", "C"]);
        let idx = entity_index(&g);
        let q = Subquery::local("what about b", pid, 1);
        let got = local_investigation(&emb, &idx, &q, &m, &g, 5).unwrap();
        assert_eq!(got, ["b".to_string()].into());
    }

    #[test]
    fn local_investigation_matches_double_union_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb = embedder();
        let mut g = random_graph(&mut rng, 25, 40);
        let mut m = MemoryHypergraph::new(false);
        let mut anchor = None;
        for i in 0..6 {
            let a = rng.random_range(0..25);
            let b = rng.random_range(0..25);
            let c = rng.random_range(0..25);
            let names: BTreeSet<String> =
                [format!("ent {a:02}"), format!("ent {b:02}"), format!("ent {c:02}")].into();
            if names.len() < 2 {
                continue;
            }
            let pid = m
                .apply_insert(
                    &mut g,
                    &emb,
                    &format!("mp {i}"),
                    &names.into_iter().collect::<Vec<_>>(),
                    &BTreeMap::new(),
                )
                .unwrap();
            anchor.get_or_insert(pid);
        }
        let anchor = anchor.unwrap();
        let idx = entity_index(&g);
        let q = Subquery::local("probe", anchor.clone(), 2);
        let n_v = 4;
        let got = local_investigation(&emb, &idx, &q, &m, &g, n_v).unwrap();

        // Brute-force oracle over the double union.
        let anchor_point = m.point(&anchor).unwrap();
        let mut candidates = BTreeSet::new();
        for v in &anchor_point.vertex_ids {
            for p in m.points() {
                if p.vertex_ids.contains(v) {
                    candidates.extend(p.vertex_ids.iter().filter(|x| *x != v).cloned());
                }
            }
            for e in g.edges() {
                if let Some(other) = e.other_endpoint(v) {
                    candidates.insert(other.clone());
                }
            }
        }
        for v in &anchor_point.vertex_ids {
            candidates.remove(v);
        }
        let expect = retrieve_entities(&emb, &idx, &[q.text.clone()], &candidates, n_v).unwrap();
        assert_eq!(got, expect);
        assert!(got.is_subset(&candidates));
    }

    #[test]
    fn local_investigation_remaps_retired_anchor() {
        let emb = embedder();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = random_graph(&mut rng, 8, 10);
        let mut m = MemoryHypergraph::new(false);
        let p0 = m
            .apply_insert(&mut g, &emb, "ab", &["ent 00".into(), "ent 01".into()], &BTreeMap::new())
            .unwrap();
        let p1 = m
            .apply_insert(&mut g, &emb, "cd", &["ent 02".into(), "ent 03".into()], &BTreeMap::new())
            .unwrap();
        let child = m.apply_merge(&p0, &p1, "merged").unwrap();
        let idx = entity_index(&g);
        let q = Subquery::local("stale", p0.clone(), 2);
        // Must behave exactly as if anchored to the merge child.
        let got = local_investigation(&emb, &idx, &q, &m, &g, 3).unwrap();
        let fresh = Subquery::local("stale", child, 2);
        let expect = local_investigation(&emb, &idx, &fresh, &m, &g, 3).unwrap();
        assert_eq!(got, expect);

        let unknown = Subquery::local("ghost", "p999".to_string(), 2);
        assert!(matches!(
            local_investigation(&emb, &idx, &unknown, &m, &g, 3),
            Err(EngineError::StaleAnchor(_))
        ));
    }

    #[test]
    fn global_exploration_with_empty_memory_covers_whole_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(&mut rng, 10, 8);
        let m = MemoryHypergraph::new(false);
        let idx = entity_index(&g);
        let emb = embedder();
        let q = Subquery::global("seed", 0);
        let got = global_exploration(&emb, &idx, &q, &m, &g, 100).unwrap();
        assert_eq!(got, g.node_ids());
    }

    #[test]
    fn global_exploration_excludes_memory_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = random_graph(&mut rng, 3, 0);
        let (m, _) = memory_with_point(&mut g, &["ent 00", "ent 01"]);
        let idx = entity_index(&g);
        let q = Subquery::global("rest", 1);
        // With one more node in memory than out, only ent 02 remains.
        let got = global_exploration(&embedder(), &idx, &q, &m, &g, 10).unwrap();
        assert_eq!(got, ["ent 02".to_string()].into());
    }

    #[test]
    fn global_exploration_matches_set_difference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let emb = embedder();
        let mut g = random_graph(&mut rng, 30, 25);
        let mut m = MemoryHypergraph::new(false);
        for i in 0..4 {
            let a = rng.random_range(0..30);
            let b = (a + 1 + rng.random_range(0..29)) % 30;
            m.apply_insert(
                &mut g,
                &emb,
                &format!("seen {i}"),
                &[format!("ent {a:02}"), format!("ent {b:02}")],
                &BTreeMap::new(),
            )
            .unwrap();
        }
        let idx = entity_index(&g);
        let q = Subquery::global("explore", 2);
        let n_v = 6;
        let got = global_exploration(&emb, &idx, &q, &m, &g, n_v).unwrap();

        let candidates: BTreeSet<EntityId> =
            g.node_ids().difference(&m.vertex_ids()).cloned().collect();
        let expect = retrieve_entities(&emb, &idx, &[q.text.clone()], &candidates, n_v).unwrap();
        assert_eq!(got, expect);
        assert!(got.intersection(&m.vertex_ids()).next().is_none());
    }

    fn store_with_chunks(g: &KnowledgeGraph, per_entity: usize) -> (ChunkStore, KnowledgeGraph) {
        // Attach synthetic chunks to each node's provenance.
        let emb = embedder();
        let mut store = ChunkStore::new();
        let mut g2 = g.clone();
        let ids: Vec<EntityId> = g.node_ids().into_iter().collect();
        for id in &ids {
            let mut chunk_ids = BTreeSet::new();
            for j in 0..per_entity {
                let text = format!("chunk about {id} number {j}");
                let cid = format!("doc:{id}:{j}");
                store.insert(Chunk {
                    id: cid.clone(),
                    doc_id: "doc".into(),
                    text: text.clone(),
                    token_start: j * 10,
                    token_end: j * 10 + 10,
                    embedding: Some(emb.embed_one(&text).unwrap()),
                });
                chunk_ids.insert(cid);
            }
            g2.upsert_node(id, "", &chunk_ids, &[], &emb).unwrap();
        }
        (store, g2)
    }

    #[test]
    fn gather_evidence_empty_entities_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_graph(&mut rng, 4, 2);
        let store = ChunkStore::new();
        let q = Subquery::global("none", 0);
        let ev = gather_evidence(&embedder(), &g, &store, &BTreeSet::new(), &q, 10, 5).unwrap();
        assert!(ev.entities.is_empty());
        assert!(ev.relations.is_empty());
        assert!(ev.chunks.is_empty());
    }

    #[test]
    fn gather_evidence_small_pools_returned_whole_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_graph(&mut rng, 6, 4);
        let (store, g) = store_with_chunks(&g, 1);
        let emb = embedder();
        let q = Subquery::global("look", 0);
        let picked: BTreeSet<EntityId> = g.node_ids().into_iter().take(3).collect();
        let ev = gather_evidence(&emb, &g, &store, &picked, &q, 100, 100).unwrap();

        // No truncation: pool sizes below caps.
        let mut edge_ids = BTreeSet::new();
        for id in &picked {
            edge_ids.extend(g.incident_edges(id));
        }
        assert_eq!(ev.relations.len(), edge_ids.len());
        assert_eq!(ev.chunks.len(), 3);

        // Sorted by descending similarity.
        let qv = emb.embed_one(&q.text).unwrap();
        let scores: Vec<f64> = ev
            .relations
            .iter()
            .map(|r| cosine_similarity(&qv, &r.embedding).unwrap())
            .collect();
        for w in scores.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn gather_evidence_matches_sort_truncate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_graph(&mut rng, 10, 30);
        let (store, g) = store_with_chunks(&g, 5);
        let emb = embedder();
        let q = Subquery::global("rank me", 1);
        let picked = g.node_ids();
        let (n_e, n_d) = (10, 5);
        let ev = gather_evidence(&emb, &g, &store, &picked, &q, n_e, n_d).unwrap();
        assert!(ev.relations.len() <= n_e);
        assert_eq!(ev.chunks.len(), n_d);

        let qv = emb.embed_one(&q.text).unwrap();

        // Oracle for chunks: full sort of the whole pool, truncate.
        let mut pool: Vec<(f64, String)> = store
            .iter()
            .map(|c| {
                (
                    cosine_similarity(&qv, c.embedding.as_ref().unwrap()).unwrap(),
                    c.id.clone(),
                )
            })
            .collect();
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let expect: Vec<String> = pool.into_iter().take(n_d).map(|(_, id)| id).collect();
        let got: Vec<String> = ev.chunks.iter().map(|c| c.id.clone()).collect();
        assert_eq!(got, expect);

        // Oracle for relations.
        let mut edge_pool: Vec<(f64, String)> = g
            .edges()
            .map(|e| {
                (
                    cosine_similarity(&qv, &e.embedding).unwrap(),
                    e.id.clone(),
                )
            })
            .collect();
        edge_pool.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let expect_edges: Vec<String> =
            edge_pool.into_iter().take(n_e).map(|(_, id)| id).collect();
        let got_edges: Vec<String> = ev.relations.iter().map(|r| r.id.clone()).collect();
        assert_eq!(got_edges, expect_edges);
    }
}
