//! The multi-step session loop: judge sufficiency, raise concerns,
//! generate subqueries, retrieve, evolve memory, and answer — plus the
//! forced per-step answering protocol and trace replay.

use serde::{Deserialize, Serialize};

use crate::corpus::ChunkStore;
use crate::embedding::{EmbeddingProvider, VectorIndex};
use crate::error::{EngineError, Result};
use crate::gateway::{Concern, Gateway};
use crate::graph::KnowledgeGraph;
use crate::memory::{self, MemoryHypergraph};
use crate::retrieval::{
    gather_evidence, global_exploration, local_investigation, Evidence, Subquery, SubqueryMode,
};
use crate::trace::{
    RetrievalRecord, SessionTrace, StepRecord, StepwiseAnswer, SubqueryRecord, TerminationReason,
};

/// Which retrieval modes subquery generation may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Adaptive,
    GlobalOnly,
    LocalOnly,
}

/// Per-session knobs. The strategy and enable flags span the ablation
/// grid; the retrieval caps are surfaced in every trace so runs are
/// self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub max_steps: u32,
    pub max_subqueries: usize,
    pub n_v: usize,
    pub n_e: usize,
    pub n_d: usize,
    pub strategy: Strategy,
    pub enable_update: bool,
    pub enable_merge: bool,
    pub chunk_budget: usize,
    pub forced_answer_every_step: bool,
    pub keep_merge_parents: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_steps: 6,
            max_subqueries: 4,
            n_v: 5,
            n_e: 10,
            n_d: 5,
            strategy: Strategy::Adaptive,
            enable_update: true,
            enable_merge: true,
            chunk_budget: 10,
            forced_answer_every_step: false,
            keep_merge_parents: false,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 1 {
            return Err(EngineError::Config("max_steps must be at least 1".into()));
        }
        if self.max_subqueries < 1 {
            return Err(EngineError::Config("max_subqueries must be at least 1".into()));
        }
        if self.n_v < 1 {
            return Err(EngineError::Config("n_v must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a session runs against. The graph is mutated in memory
/// only (forced upserts); the on-disk index stays frozen, which is what
/// makes traces replayable against it.
pub struct SessionEnv<'a> {
    pub graph: &'a mut KnowledgeGraph,
    pub chunk_store: &'a ChunkStore,
    pub entity_index: &'a mut VectorIndex,
    pub gateway: Gateway<'a>,
    pub embedder: &'a dyn EmbeddingProvider,
}

/// Runs the full loop: a step-0 seed retrieval over the target query,
/// then judge / concern / subquery / retrieve / evolve rounds until the
/// memory is judged sufficient or the step cap is hit.
pub fn run_session(
    env: &mut SessionEnv,
    target_query: &str,
    config: &SessionConfig,
) -> Result<(String, SessionTrace)> {
    config.validate()?;
    if config.forced_answer_every_step {
        let (answers, trace) = run_stepwise(env, target_query, config)?;
        let answer = answers.last().cloned().unwrap_or_default();
        return Ok((answer, trace));
    }

    let mut trace = SessionTrace::new(target_query, config.clone());
    let mut m = MemoryHypergraph::new(config.keep_merge_parents);

    // Step 0: the target query acts as a single global seed subquery;
    // judging an empty memory would be vacuous.
    let seed = Subquery::global(target_query, 0);
    evolution_step(env, &mut m, &mut trace, 0, vec![seed], true, target_query, config)?;

    for t in 1..=config.max_steps {
        let sufficient = env
            .gateway
            .judge_sufficiency(&m, target_query, t, &mut trace)?;
        trace.judgments.push((t, sufficient));

        if sufficient || t == config.max_steps {
            let answer = env.gateway.generate_response(
                &m,
                env.chunk_store,
                env.embedder,
                target_query,
                config.chunk_budget,
                t,
                &mut trace,
            )?;
            trace.termination = if sufficient {
                TerminationReason::Sufficient
            } else {
                TerminationReason::StepCap
            };
            trace.final_answer = answer.clone();
            return Ok((answer, trace));
        }

        let mut concerns = env.gateway.raise_concerns(&m, target_query, t, &mut trace)?;
        if concerns.is_empty() {
            // Degradation policy: force one global concern from the
            // target query so the step can still make progress.
            concerns.push(Concern {
                text: target_query.to_string(),
                target_point: None,
            });
        }
        let subqueries = env.gateway.generate_subqueries(
            &concerns,
            &m,
            target_query,
            config.max_subqueries,
            t,
            &mut trace,
        )?;
        let subqueries = force_strategy(subqueries, config.strategy);
        evolution_step(env, &mut m, &mut trace, t, subqueries, false, target_query, config)?;
    }
    unreachable!("loop always terminates by sufficiency or step cap");
}

/// The forced-answer protocol: run every evolution step up to the cap
/// (no sufficiency judging) and generate a response after each one.
/// Forced answering never perturbs evolution.
pub fn run_stepwise(
    env: &mut SessionEnv,
    target_query: &str,
    config: &SessionConfig,
) -> Result<(Vec<String>, SessionTrace)> {
    config.validate()?;
    let mut config = config.clone();
    config.forced_answer_every_step = true;

    let mut trace = SessionTrace::new(target_query, config.clone());
    let mut m = MemoryHypergraph::new(config.keep_merge_parents);
    let mut answers = Vec::with_capacity(config.max_steps as usize);

    for t in 0..config.max_steps {
        let subqueries = if t == 0 {
            vec![Subquery::global(target_query, 0)]
        } else {
            let mut concerns = env.gateway.raise_concerns(&m, target_query, t, &mut trace)?;
            if concerns.is_empty() {
                concerns.push(Concern {
                    text: target_query.to_string(),
                    target_point: None,
                });
            }
            let subqueries = env.gateway.generate_subqueries(
                &concerns,
                &m,
                target_query,
                config.max_subqueries,
                t,
                &mut trace,
            )?;
            force_strategy(subqueries, config.strategy)
        };
        evolution_step(env, &mut m, &mut trace, t, subqueries, t == 0, target_query, &config)?;

        let answer = env.gateway.generate_response(
            &m,
            env.chunk_store,
            env.embedder,
            target_query,
            config.chunk_budget,
            t,
            &mut trace,
        )?;
        trace.stepwise_answers.push(StepwiseAnswer {
            step: t,
            answer: answer.clone(),
        });
        answers.push(answer);
    }

    trace.termination = TerminationReason::StepCap;
    trace.final_answer = answers.last().cloned().unwrap_or_default();
    Ok((answers, trace))
}

/// Applies the configured strategy to generated subqueries: global-only
/// rewrites everything to global; local-only drops global subqueries.
fn force_strategy(subqueries: Vec<Subquery>, strategy: Strategy) -> Vec<Subquery> {
    match strategy {
        Strategy::Adaptive => subqueries,
        Strategy::GlobalOnly => subqueries
            .into_iter()
            .map(|sq| Subquery::global(sq.text, sq.origin_step))
            .collect(),
        Strategy::LocalOnly => subqueries
            .into_iter()
            .filter(|sq| {
                let keep = sq.mode == SubqueryMode::Local;
                if !keep {
                    log::info!("local-only strategy drops global subquery {:?}", sq.text);
                }
                keep
            })
            .collect(),
    }
}

/// One evolution step: retrieve per subquery, gather capped evidence,
/// propose a delta, apply it, and snapshot the memory.
#[allow(clippy::too_many_arguments)]
fn evolution_step(
    env: &mut SessionEnv,
    m: &mut MemoryHypergraph,
    trace: &mut SessionTrace,
    step: u32,
    subqueries: Vec<Subquery>,
    seed: bool,
    target_query: &str,
    config: &SessionConfig,
) -> Result<()> {
    m.set_step(step);

    let mut sub_records = Vec::with_capacity(subqueries.len());
    let mut retrievals = Vec::with_capacity(subqueries.len());
    let mut evidences: Vec<Evidence> = Vec::with_capacity(subqueries.len());

    for sq in subqueries {
        let (effective_mode, fallback_global, entity_ids) = match sq.mode {
            SubqueryMode::Global => {
                let ids =
                    global_exploration(env.embedder, env.entity_index, &sq, m, env.graph, config.n_v)?;
                (SubqueryMode::Global, false, ids)
            }
            SubqueryMode::Local => {
                match local_investigation(env.embedder, env.entity_index, &sq, m, env.graph, config.n_v)
                {
                    Ok(ids) if ids.is_empty() && config.strategy == Strategy::Adaptive => {
                        // Empty anchor neighborhood: fall back to global
                        // so sparse graphs do not starve the step.
                        log::info!(
                            "local subquery {:?} found an empty neighborhood; falling back to global",
                            sq.text
                        );
                        let ids = global_exploration(
                            env.embedder,
                            env.entity_index,
                            &sq,
                            m,
                            env.graph,
                            config.n_v,
                        )?;
                        (SubqueryMode::Global, true, ids)
                    }
                    Ok(ids) => (SubqueryMode::Local, false, ids),
                    Err(EngineError::StaleAnchor(anchor)) => {
                        // The anchor has no live descendant; rerun the
                        // subquery as a global exploration.
                        log::warn!("anchor {anchor} is stale; regenerating subquery as global");
                        let ids = global_exploration(
                            env.embedder,
                            env.entity_index,
                            &sq,
                            m,
                            env.graph,
                            config.n_v,
                        )?;
                        (SubqueryMode::Global, true, ids)
                    }
                    Err(e) => return Err(e),
                }
            }
        };

        let executed = Subquery {
            text: sq.text.clone(),
            mode: effective_mode,
            anchor_point: if effective_mode == SubqueryMode::Local {
                sq.anchor_point.clone()
            } else {
                None
            },
            origin_step: sq.origin_step,
        };
        let evidence = gather_evidence(
            env.embedder,
            env.graph,
            env.chunk_store,
            &entity_ids,
            &executed,
            config.n_e,
            config.n_d,
        )?;

        retrievals.push(RetrievalRecord {
            entities: evidence.entities.iter().map(|e| e.id.clone()).collect(),
            relations: evidence.relations.iter().map(|r| r.id.clone()).collect(),
            chunks: evidence.chunks.iter().map(|c| c.id.clone()).collect(),
        });
        sub_records.push(SubqueryRecord {
            subquery: executed.clone(),
            effective_mode,
            fallback_global,
            seed,
        });
        evidences.push(evidence);
    }

    let delta = env.gateway.propose_memory_delta(
        m,
        env.graph,
        env.embedder,
        &evidences,
        target_query,
        config.enable_update,
        config.enable_merge,
        step,
        trace,
    )?;
    let report = m.apply_delta(env.graph, env.embedder, &delta);
    for rejected in &report.rejected {
        log::warn!(
            "step {step}: rejected {} ({}): {}",
            rejected.kind,
            rejected.detail,
            rejected.reason
        );
    }

    // Forced upserts may have added or refreshed graph nodes; keep the
    // entity index in lockstep.
    sync_entity_index(env.entity_index, env.graph)?;

    trace.steps.push(StepRecord {
        step,
        subqueries: sub_records,
        retrievals,
        delta_report: report,
    });
    trace.snapshots.push(memory::snapshot_records(m));
    Ok(())
}

/// Re-inserts every graph node vector, picking up additions and
/// description-refresh re-embeddings.
pub fn sync_entity_index(index: &mut VectorIndex, g: &KnowledgeGraph) -> Result<()> {
    for node in g.nodes() {
        index.insert(node.id.clone(), node.embedding.clone())?;
    }
    Ok(())
}

/// Builds the entity vector index for a graph.
pub fn build_entity_index(g: &KnowledgeGraph, dim: usize) -> Result<VectorIndex> {
    let mut index = VectorIndex::new(dim);
    sync_entity_index(&mut index, g)?;
    Ok(index)
}

/// Rebuilds the final memory by applying the trace's recorded deltas in
/// order from an empty memory, checking every step against the recorded
/// snapshot. The first differing step is reported.
pub fn replay_trace(
    trace: &SessionTrace,
    graph: &KnowledgeGraph,
    embedder: &dyn EmbeddingProvider,
) -> Result<MemoryHypergraph> {
    let mut g = graph.clone();
    let mut m = MemoryHypergraph::new(trace.config.keep_merge_parents);

    for (idx, step_record) in trace.steps.iter().enumerate() {
        let step = step_record.step;
        m.set_step(step);
        let diverged = |what: String| {
            log::warn!("replay step {step}: {what}");
            EngineError::ReplayDivergence { step }
        };

        for update in &step_record.delta_report.applied_updates {
            m.apply_update(&update.point_id, &update.description)
                .map_err(|e| diverged(format!("update failed: {e}")))?;
        }
        for insert in &step_record.delta_report.applied_insertions {
            let pid = m
                .apply_insert(
                    &mut g,
                    embedder,
                    &insert.op.description,
                    &insert.op.vertex_names,
                    &insert.op.provenance,
                )
                .map_err(|e| diverged(format!("insert failed: {e}")))?;
            if pid != insert.point_id {
                return Err(diverged(format!(
                    "insert produced {pid}, trace recorded {}",
                    insert.point_id
                )));
            }
        }
        for merge in &step_record.delta_report.applied_merges {
            let pid = m
                .apply_merge(&merge.left, &merge.right, &merge.description)
                .map_err(|e| diverged(format!("merge failed: {e}")))?;
            if pid != merge.point_id {
                return Err(diverged(format!(
                    "merge produced {pid}, trace recorded {}",
                    merge.point_id
                )));
            }
        }

        let recorded = memory::from_snapshot_records(&trace.snapshots[idx])?;
        if m != recorded {
            return Err(EngineError::ReplayDivergence { step });
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let config = SessionConfig::default();
        assert_eq!(config.max_steps, 6);
        assert_eq!((config.n_v, config.n_e, config.n_d), (5, 10, 5));
        assert!(config.validate().is_ok());

        let bad = SessionConfig { max_steps: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_deserializes_with_partial_fields() {
        let config: SessionConfig = serde_json::from_str(r#"{"max_steps": 2}"#).unwrap();
        assert_eq!(config.max_steps, 2);
        assert_eq!(config.n_v, 5);
        assert_eq!(config.strategy, Strategy::Adaptive);
    }

    #[test]
    fn strategy_forcing_rewrites_or_drops() {
        let sqs = vec![
            Subquery::local("a", "p0".into(), 1),
            Subquery::global("b", 1),
        ];
        let forced = force_strategy(sqs.clone(), Strategy::GlobalOnly);
        assert!(forced.iter().all(|s| s.mode == SubqueryMode::Global));
        assert!(forced.iter().all(|s| s.anchor_point.is_none()));

        let forced = force_strategy(sqs.clone(), Strategy::LocalOnly);
        assert_eq!(forced.len(), 1);
        assert_eq!(forced[0].mode, SubqueryMode::Local);

        let forced = force_strategy(sqs.clone(), Strategy::Adaptive);
        assert_eq!(forced, sqs);
    }
}
