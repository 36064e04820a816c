//! Shared fixture world for session-level tests: a small hand-built
//! graph with chunk provenance and helpers for scripted chat fixtures.

use std::collections::BTreeSet;

use hypermem_core::corpus::{Chunk, ChunkStore};
use hypermem_core::embedding::{EmbeddingProvider, ScriptedEmbedder, VectorIndex};
use hypermem_core::graph::{KnowledgeGraph, RelationSpec};
use hypermem_core::llm::ChatFixture;
use hypermem_core::orchestrator::build_entity_index;
use hypermem_core::prompts::PromptSet;

pub const DIM: usize = 8;

pub struct World {
    pub graph: KnowledgeGraph,
    pub chunks: ChunkStore,
    pub index: VectorIndex,
    pub embedder: ScriptedEmbedder,
    pub prompts: PromptSet,
}

pub fn fixtures(entries: &[(&str, u32, u32, &str)]) -> Vec<ChatFixture> {
    entries
        .iter()
        .map(|(tag, step, seq, response)| ChatFixture {
            tag: tag.to_string(),
            step: *step,
            seq: *seq,
            response: response.to_string(),
        })
        .collect()
}

impl World {
    /// A little narrative world: six entities, a few relations, chunks
    /// attached as provenance.
    pub fn new() -> Self {
        let embedder = ScriptedEmbedder::new(DIM, true);
        let mut chunks = ChunkStore::new();
        let mut graph = KnowledgeGraph::new();

        let chunk_texts = [
            ("story:0-40", "Xodar was brought from the adjoining room and Issus glared at him."),
            ("story:30-70", "For the disgrace brought upon the Immortal Race he shall be degraded."),
            ("story:60-100", "No longer a Dator, but forevermore a slave of slaves."),
            ("story:90-130", "John Carter had defeated Xodar in the prison on the Isle of Shador."),
        ];
        for (i, (id, text)) in chunk_texts.iter().enumerate() {
            chunks.insert(Chunk {
                id: id.to_string(),
                doc_id: "story".into(),
                text: text.to_string(),
                token_start: i * 30,
                token_end: i * 30 + 40,
                embedding: Some(embedder.embed_one(text).unwrap()),
            });
        }

        let provenance = |ids: &[&str]| -> BTreeSet<String> {
            ids.iter().map(|s| s.to_string()).collect()
        };
        let nodes: &[(&str, &str, &[&str])] = &[
            ("Xodar", "A Dator of the First Born", &["story:0-40", "story:90-130"]),
            ("Issus", "Goddess of the First Born", &["story:0-40", "story:30-70"]),
            ("John Carter", "Warlord who defeated Xodar", &["story:90-130"]),
            ("Cowardly injustice", "The judgment passed on Xodar", &["story:30-70"]),
            ("Degradation", "Xodar's fall to a slave of slaves", &["story:60-100"]),
            ("Isle of Shador", "Prison isle", &["story:90-130"]),
        ];
        for (name, description, chunk_ids) in nodes {
            graph
                .upsert_node(name, description, &provenance(chunk_ids), &[], &embedder)
                .unwrap();
        }
        let relations = [
            ("Issus", "Xodar", "condemned him for disgrace", vec!["story:0-40"]),
            ("John Carter", "Xodar", "defeated him in the prison", vec!["story:90-130"]),
            ("Xodar", "Degradation", "suffered it", vec!["story:60-100"]),
            ("Issus", "Cowardly injustice", "dispensed it", vec!["story:30-70"]),
            ("John Carter", "Isle of Shador", "was held there", vec!["story:90-130"]),
        ];
        for (source, target, description, chunk_ids) in relations {
            let refs: Vec<&str> = chunk_ids;
            graph
                .add_relation(
                    &RelationSpec {
                        source_name: source.into(),
                        target_name: target.into(),
                        description: description.into(),
                        chunk_ids: refs.iter().map(|s| s.to_string()).collect(),
                    },
                    &embedder,
                )
                .unwrap();
        }

        let index = build_entity_index(&graph, DIM).unwrap();
        Self {
            graph,
            chunks,
            index,
            embedder,
            prompts: PromptSet::builtin(),
        }
    }
}

/// Fixture set for a session that is never sufficient: evolution at
/// every step 0..max_steps, judge NO at 1..=max_steps, plus per-step
/// answers so the same set drives both the normal and stepwise runs.
pub fn never_sufficient_fixtures(max_steps: u32) -> Vec<ChatFixture> {
    let mut entries: Vec<ChatFixture> = Vec::new();
    let mut push = |tag: &str, step: u32, seq: u32, response: String| {
        entries.push(ChatFixture {
            tag: tag.into(),
            step,
            seq,
            response,
        });
    };

    // Step 0 consolidates the seed retrieval into two points.
    push(
        "memory_delta",
        0,
        0,
        "INSERT\nentities: Xodar | Issus\ndescription: Issus condemned Xodar\nEND\n\
         INSERT\nentities: Xodar | John Carter\ndescription: Carter defeated Xodar\nEND\n"
            .into(),
    );
    push("merge_description", 0, 0, "NONE".into());
    push("answer", 0, 0, "answer after step 0".into());

    for t in 1..=max_steps {
        push("sufficiency", t, 0, "SUFFICIENT: NO".into());
        if t < max_steps {
            push(
                "concerns",
                t,
                0,
                "CONCERN\ntarget: p0\ntext: what exactly did Issus decree?\nEND\n".into(),
            );
            push(
                "subqueries",
                t,
                0,
                "SUBQUERY\nconcern: 1\ntext: what did Issus decree for Xodar?\nEND\n".into(),
            );
            push(
                "memory_delta",
                t,
                0,
                format!("UPDATE\npoint: p0\ndescription: Issus condemned Xodar, revision {t}\nEND\n"),
            );
            push("merge_description", t, 0, "NONE".into());
            push("answer", t, 0, format!("answer after step {t}"));
        }
    }
    push("answer", max_steps, 0, "final capped answer".into());
    entries
}
