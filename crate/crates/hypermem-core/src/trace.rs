//! The per-session record: every subquery, retrieval, memory delta,
//! snapshot, and LLM exchange, persisted as line-delimited records so a
//! session can be replayed and inspected offline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ChunkId;
use crate::error::{EngineError, Result};
use crate::graph::{EdgeId, EntityId};
use crate::memory::{DeltaReport, MemoryRecord};
use crate::orchestrator::SessionConfig;
use crate::retrieval::{Subquery, SubqueryMode};
use crate::store;

/// One LLM request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub tag: String,
    pub step: u32,
    pub seq: u32,
    pub prompt: String,
    pub response: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

/// A subquery as executed: the generated intent plus the mode actually
/// used after strategy forcing and empty-neighborhood fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubqueryRecord {
    pub subquery: Subquery,
    pub effective_mode: SubqueryMode,
    /// True when an adaptive local subquery fell back to global because
    /// its anchor neighborhood was empty.
    pub fallback_global: bool,
    /// True for the step-0 seed subquery.
    pub seed: bool,
}

/// What one subquery retrieved, by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub entities: Vec<EntityId>,
    pub relations: Vec<EdgeId>,
    pub chunks: Vec<ChunkId>,
}

/// One evolution step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub subqueries: Vec<SubqueryRecord>,
    /// Parallel to `subqueries`.
    pub retrievals: Vec<RetrievalRecord>,
    pub delta_report: DeltaReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminationReason {
    Sufficient,
    StepCap,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseAnswer {
    pub step: u32,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

/// Everything one session did.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionTrace {
    pub session_id: String,
    pub target_query: String,
    pub config: SessionConfig,
    pub steps: Vec<StepRecord>,
    /// `(step, sufficient)` for every sufficiency judgment made.
    pub judgments: Vec<(u32, bool)>,
    pub exchanges: Vec<ExchangeRecord>,
    /// Post-evolution memory snapshot per step, parallel to `steps`.
    pub snapshots: Vec<Vec<MemoryRecord>>,
    pub stepwise_answers: Vec<StepwiseAnswer>,
    pub final_answer: String,
    pub termination: TerminationReason,
    pub totals: Totals,
}

impl SessionTrace {
    pub fn new(target_query: &str, config: SessionConfig) -> Self {
        let session_id = session_id_for(target_query, &config);
        Self {
            session_id,
            target_query: target_query.to_string(),
            config,
            steps: Vec::new(),
            judgments: Vec::new(),
            exchanges: Vec::new(),
            snapshots: Vec::new(),
            stepwise_answers: Vec::new(),
            final_answer: String::new(),
            termination: TerminationReason::Aborted,
            totals: Totals::default(),
        }
    }

    pub fn record_exchange(&mut self, record: ExchangeRecord) {
        self.totals.prompt_tokens += record.prompt_tokens;
        self.totals.completion_tokens += record.completion_tokens;
        self.totals.latency_ms += record.latency_ms;
        self.exchanges.push(record);
    }

    /// Persists the trace as a directory of record files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("steps"))?;
        std::fs::create_dir_all(dir.join("memory"))?;

        let summary = SessionSummary {
            session_id: self.session_id.clone(),
            target_query: self.target_query.clone(),
            termination: self.termination,
            step_count: self.steps.len(),
            totals: self.totals.clone(),
        };
        std::fs::write(dir.join("session.json"), serde_json::to_string(&summary)? + "\n")?;
        std::fs::write(dir.join("config.json"), serde_json::to_string(&self.config)? + "\n")?;
        std::fs::write(dir.join("answer.txt"), &self.final_answer)?;

        store::write_jsonl(&dir.join("exchanges.jsonl"), &self.exchanges)?;
        let judgments: Vec<JudgmentRecord> = self
            .judgments
            .iter()
            .map(|(step, sufficient)| JudgmentRecord {
                step: *step,
                sufficient: *sufficient,
            })
            .collect();
        store::write_jsonl(&dir.join("judgments.jsonl"), &judgments)?;

        for record in &self.steps {
            let path = dir.join("steps").join(format!("step-{}.json", record.step));
            std::fs::write(path, serde_json::to_string(record)? + "\n")?;
        }
        for (idx, snapshot) in self.snapshots.iter().enumerate() {
            let step = self.steps[idx].step;
            let path = dir.join("memory").join(format!("step-{step}.jsonl"));
            store::write_jsonl(&path, snapshot)?;
        }
        if !self.stepwise_answers.is_empty() {
            store::write_jsonl(&dir.join("answers.jsonl"), &self.stepwise_answers)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let summary: SessionSummary = read_json(&dir.join("session.json"))?;
        let config: SessionConfig = read_json(&dir.join("config.json"))?;
        let final_answer = std::fs::read_to_string(dir.join("answer.txt"))?;
        let exchanges: Vec<ExchangeRecord> = store::read_jsonl(&dir.join("exchanges.jsonl"))?;
        let judgments: Vec<JudgmentRecord> = store::read_jsonl(&dir.join("judgments.jsonl"))?;

        let mut steps = Vec::new();
        let mut snapshots = Vec::new();
        for step in 0..summary.step_count {
            let record: StepRecord =
                read_json(&dir.join("steps").join(format!("step-{step}.json")))?;
            if record.step as usize != step {
                return Err(EngineError::Trace(format!(
                    "step file {step} carries step index {}",
                    record.step
                )));
            }
            snapshots.push(store::read_jsonl(
                &dir.join("memory").join(format!("step-{step}.jsonl")),
            )?);
            steps.push(record);
        }

        let answers_path = dir.join("answers.jsonl");
        let stepwise_answers = if answers_path.exists() {
            store::read_jsonl(&answers_path)?
        } else {
            Vec::new()
        };

        Ok(Self {
            session_id: summary.session_id,
            target_query: summary.target_query,
            config,
            steps,
            judgments: judgments.into_iter().map(|j| (j.step, j.sufficient)).collect(),
            exchanges,
            snapshots,
            stepwise_answers,
            final_answer,
            termination: summary.termination,
            totals: summary.totals,
        })
    }

    /// Directory this session persists under, relative to a trace root.
    pub fn dir_name(&self) -> PathBuf {
        PathBuf::from(format!("session-{}", self.session_id))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| EngineError::CorruptStore {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Stable id from query + config so identical runs land in the same
/// directory.
fn session_id_for(target_query: &str, config: &SessionConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(target_query.as_bytes());
    hasher.update(serde_json::to_string(config).unwrap_or_default().as_bytes());
    hex::encode(hasher.finalize())[..12].to_string()
}

#[derive(Serialize, Deserialize)]
struct SessionSummary {
    session_id: String,
    target_query: String,
    termination: TerminationReason,
    step_count: usize,
    totals: Totals,
}

#[derive(Serialize, Deserialize)]
struct JudgmentRecord {
    step: u32,
    sufficient: bool,
}
