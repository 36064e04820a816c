//! Evaluation protocols: binary accuracy via an LLM judge, two-step
//! 0-100 scoring for comprehensiveness and diversity, and
//! memory-structure statistics over session traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::llm::{ChatMessage, ChatProvider, ChatRequest};
use crate::parse;
use crate::prompts::{fill, PromptSet, ScoringAsset};

/// The query taxonomy used for grouped statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryType {
    Primitive,
    SenseMaking,
}

impl QueryType {
    pub fn label(&self) -> &'static str {
        match self {
            QueryType::Primitive => "primitive",
            QueryType::SenseMaking => "sense-making",
        }
    }
}

/// One evaluation record from the results manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub query: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub query_type: Option<QueryType>,
    /// Required for accuracy judging.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted: Option<String>,
    /// Session trace directory, for memory statistics.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace_dir: Option<String>,
    /// Source paragraph for generative scoring.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_passage: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyJudgment {
    pub correct: bool,
    /// Set when the verdict came from the double-parse-failure fallback
    /// rather than a parsed reply.
    pub parse_failed: bool,
}

const FORMAT_REMINDER: &str =
    "\n\nYour previous reply did not follow the required format. Reply with exactly the format described above.";

fn chat_once(
    provider: &dyn ChatProvider,
    tag: &str,
    step: u32,
    prompt: String,
) -> Result<String> {
    let req = ChatRequest::new(tag, step, vec![ChatMessage::user(prompt)]);
    Ok(provider.chat(&req)?.text)
}

/// Binary accuracy: does the prediction entail the reference? Strict
/// TRUE/FALSE parse with one reprompt; a second failure counts as FALSE
/// and is flagged.
pub fn judge_accuracy(
    provider: &dyn ChatProvider,
    prompts: &PromptSet,
    query: &str,
    predicted: &str,
    reference: &str,
    step: u32,
) -> Result<AccuracyJudgment> {
    let prompt = fill(
        &prompts.judge,
        &[
            ("query", query),
            ("reference", reference),
            ("prediction", predicted),
        ],
    );
    let reply = chat_once(provider, "judge", step, prompt.clone())?;
    if let Some(v) = parse::find_true_false(&reply, "VERDICT") {
        return Ok(AccuracyJudgment { correct: v, parse_failed: false });
    }
    let reply = chat_once(provider, "judge", step, prompt + FORMAT_REMINDER)?;
    match parse::find_true_false(&reply, "VERDICT") {
        Some(v) => Ok(AccuracyJudgment { correct: v, parse_failed: false }),
        None => {
            log::warn!("accuracy judge reply unparseable twice for record step {step}");
            Ok(AccuracyJudgment { correct: false, parse_failed: true })
        }
    }
}

/// Two-step generative scoring: the judge picks a level, then a score
/// within that level's declared range. Scores outside the range trigger
/// one reprompt; a second failure leaves the record unscored.
pub fn score_generative(
    provider: &dyn ChatProvider,
    asset: &ScoringAsset,
    query: &str,
    source_passage: &str,
    response: &str,
    step: u32,
) -> Result<Option<u32>> {
    let prompt = fill(
        &asset.template,
        &[
            ("query", query),
            ("source_passage", source_passage),
            ("response", response),
            ("levels", &asset.levels_text()),
        ],
    );
    for attempt in 0..2 {
        let text = if attempt == 0 {
            prompt.clone()
        } else {
            prompt.clone() + FORMAT_REMINDER
        };
        let reply = chat_once(provider, &asset.dimension, step, text)?;
        let level_name = parse::find_labeled(&reply, "LEVEL");
        let score = parse::find_labeled(&reply, "SCORE").and_then(|s| s.parse::<u32>().ok());
        if let (Some(level_name), Some(score)) = (level_name, score) {
            if let Some(level) = asset.level(&level_name) {
                if score >= level.min && score <= level.max {
                    return Ok(Some(score));
                }
                log::warn!(
                    "{} score {score} outside level {} range {}-{}",
                    asset.dimension,
                    level.name,
                    level.min,
                    level.max
                );
            } else {
                log::warn!("{} reply named unknown level {level_name}", asset.dimension);
            }
        }
    }
    log::warn!("{} scoring failed twice at record step {step}; leaving unscored", asset.dimension);
    Ok(None)
}

/// One group row of the memory-statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStatsRow {
    pub group: String,
    pub sessions: usize,
    pub mean_avg_entities_per_hyperedge: f64,
    /// Fraction correct among judged records in the group, if any were
    /// judged.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

/// Input to the statistics table: one session's group label, its final
/// memory's average entities per hyperedge, and its judged correctness.
#[derive(Debug, Clone)]
pub struct StatsItem {
    pub group: String,
    pub avg_entities: f64,
    pub correct: Option<bool>,
}

/// Groups sessions and averages their final-memory hyperedge sizes and
/// accuracy. Pure: input order never affects the output rows.
pub fn memory_stats(items: &[StatsItem]) -> Vec<MemoryStatsRow> {
    let mut groups: BTreeMap<String, Vec<&StatsItem>> = BTreeMap::new();
    for item in items {
        groups.entry(item.group.clone()).or_default().push(item);
    }
    groups
        .into_iter()
        .map(|(group, members)| {
            let mean = members.iter().map(|m| m.avg_entities).sum::<f64>() / members.len() as f64;
            let judged: Vec<bool> = members.iter().filter_map(|m| m.correct).collect();
            let accuracy = if judged.is_empty() {
                None
            } else {
                Some(judged.iter().filter(|c| **c).count() as f64 / judged.len() as f64)
            };
            MemoryStatsRow {
                group,
                sessions: members.len(),
                mean_avg_entities_per_hyperedge: mean,
                accuracy,
            }
        })
        .collect()
}

/// Per-record evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub query_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub correct: Option<bool>,
    #[serde(default)]
    pub judge_parse_failed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub comprehensiveness: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diversity: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub avg_entities_per_hyperedge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Batch-level aggregates. Unscored records are excluded from means and
/// counted, never imputed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: usize,
    pub judged: usize,
    pub correct: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_comprehensiveness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_diversity: Option<f64>,
    pub unscored_comprehensiveness: usize,
    pub unscored_diversity: usize,
    pub failed_records: usize,
    pub stats: Vec<MemoryStatsRow>,
}

/// Judges and scores a batch of records. Scripted fixtures key on the
/// record index as the step, so batches are reproducible. Per-record
/// failures are reported in the row, never aborting the batch.
pub fn evaluate_records(
    records: &[EvalRecord],
    judge_provider: &dyn ChatProvider,
    prompts: &PromptSet,
    avg_entities_of: impl Fn(&EvalRecord) -> Option<f64>,
) -> Result<(Vec<EvalRow>, EvalSummary)> {
    let mut rows = Vec::with_capacity(records.len());
    let mut stats_items = Vec::new();

    for (idx, record) in records.iter().enumerate() {
        let step = idx as u32;
        let mut row = EvalRow {
            query_id: record.query_id.clone(),
            correct: None,
            judge_parse_failed: false,
            comprehensiveness: None,
            diversity: None,
            avg_entities_per_hyperedge: None,
            error: None,
        };

        let outcome = (|| -> Result<()> {
            if let (Some(reference), Some(predicted)) = (&record.reference, &record.predicted) {
                let judgment = judge_accuracy(
                    judge_provider,
                    prompts,
                    &record.query,
                    predicted,
                    reference,
                    step,
                )?;
                row.correct = Some(judgment.correct);
                row.judge_parse_failed = judgment.parse_failed;
            }
            if let (Some(passage), Some(predicted)) = (&record.source_passage, &record.predicted) {
                row.comprehensiveness = score_generative(
                    judge_provider,
                    &prompts.comprehensiveness,
                    &record.query,
                    passage,
                    predicted,
                    step,
                )?;
                row.diversity = score_generative(
                    judge_provider,
                    &prompts.diversity,
                    &record.query,
                    passage,
                    predicted,
                    step,
                )?;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            row.error = Some(e.to_string());
        }

        row.avg_entities_per_hyperedge = avg_entities_of(record);
        if let Some(avg) = row.avg_entities_per_hyperedge {
            let group = record
                .query_type
                .map(|t| t.label().to_string())
                .unwrap_or_else(|| "unlabeled".to_string());
            stats_items.push(StatsItem {
                group,
                avg_entities: avg,
                correct: row.correct,
            });
        }
        rows.push(row);
    }

    let judged: Vec<&EvalRow> = rows.iter().filter(|r| r.correct.is_some()).collect();
    let correct = judged.iter().filter(|r| r.correct == Some(true)).count();
    let comp: Vec<u32> = rows.iter().filter_map(|r| r.comprehensiveness).collect();
    let div: Vec<u32> = rows.iter().filter_map(|r| r.diversity).collect();
    let expected_scored = records
        .iter()
        .filter(|r| r.source_passage.is_some() && r.predicted.is_some())
        .count();

    let summary = EvalSummary {
        records: records.len(),
        judged: judged.len(),
        correct,
        accuracy: if judged.is_empty() {
            None
        } else {
            Some(correct as f64 / judged.len() as f64)
        },
        mean_comprehensiveness: mean_of(&comp),
        mean_diversity: mean_of(&div),
        unscored_comprehensiveness: expected_scored - comp.len(),
        unscored_diversity: expected_scored - div.len(),
        failed_records: rows.iter().filter(|r| r.error.is_some()).count(),
        stats: memory_stats(&stats_items),
    };
    Ok((rows, summary))
}

fn mean_of(values: &[u32]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().map(|v| *v as f64).sum::<f64>() / values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatFixture, ScriptedChatProvider};

    fn provider(entries: &[(&str, u32, u32, &str)]) -> ScriptedChatProvider {
        ScriptedChatProvider::new(
            entries
                .iter()
                .map(|(tag, step, seq, response)| ChatFixture {
                    tag: tag.to_string(),
                    step: *step,
                    seq: *seq,
                    response: response.to_string(),
                })
                .collect(),
        )
    }

    #[test]
    fn judge_parses_true_and_false() {
        let prompts = PromptSet::builtin();
        let p = provider(&[("judge", 0, 0, "VERDICT: TRUE")]);
        let j = judge_accuracy(&p, &prompts, "q", "same", "same", 0).unwrap();
        assert!(j.correct && !j.parse_failed);

        let p = provider(&[("judge", 0, 0, "VERDICT: FALSE")]);
        let j = judge_accuracy(&p, &prompts, "q", "a", "b", 0).unwrap();
        assert!(!j.correct && !j.parse_failed);
    }

    #[test]
    fn judge_double_parse_failure_is_false_and_flagged() {
        let prompts = PromptSet::builtin();
        let p = provider(&[
            ("judge", 3, 0, "hard to say really"),
            ("judge", 3, 1, "hmm"),
        ]);
        let j = judge_accuracy(&p, &prompts, "q", "a", "b", 3).unwrap();
        assert!(!j.correct);
        assert!(j.parse_failed);
    }

    #[test]
    fn score_accepts_value_within_level_range() {
        let prompts = PromptSet::builtin();
        let p = provider(&[("comprehensiveness", 0, 0, "LEVEL: strong\nSCORE: 65")]);
        let s = score_generative(&p, &prompts.comprehensiveness, "q", "src", "resp", 0).unwrap();
        assert_eq!(s, Some(65));
    }

    #[test]
    fn score_out_of_range_reprompts_then_uses_second_value() {
        let prompts = PromptSet::builtin();
        let p = provider(&[
            ("comprehensiveness", 1, 0, "LEVEL: strong\nSCORE: 95"),
            ("comprehensiveness", 1, 1, "LEVEL: strong\nSCORE: 72"),
        ]);
        let s = score_generative(&p, &prompts.comprehensiveness, "q", "src", "resp", 1).unwrap();
        assert_eq!(s, Some(72));
    }

    #[test]
    fn score_double_failure_is_unscored() {
        let prompts = PromptSet::builtin();
        let p = provider(&[
            ("diversity", 2, 0, "LEVEL: strong\nSCORE: 5"),
            ("diversity", 2, 1, "LEVEL: nonsense\nSCORE: 50"),
        ]);
        let s = score_generative(&p, &prompts.diversity, "q", "src", "resp", 2).unwrap();
        assert_eq!(s, None);
    }

    #[test]
    fn memory_stats_groups_and_is_order_invariant() {
        let mut items = vec![
            StatsItem { group: "sense-making".into(), avg_entities: 3.0, correct: Some(true) },
            StatsItem { group: "primitive".into(), avg_entities: 7.0, correct: Some(false) },
            StatsItem { group: "sense-making".into(), avg_entities: 7.0, correct: Some(true) },
        ];
        let a = memory_stats(&items);
        items.reverse();
        let b = memory_stats(&items);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        let sense = a.iter().find(|r| r.group == "sense-making").unwrap();
        assert_eq!(sense.mean_avg_entities_per_hyperedge, 5.0);
        assert_eq!(sense.accuracy, Some(1.0));
        assert_eq!(sense.sessions, 2);
    }

    #[test]
    fn single_trace_stats_row() {
        let rows = memory_stats(&[StatsItem {
            group: "unlabeled".into(),
            avg_entities: 5.0,
            correct: None,
        }]);
        assert_eq!(rows[0].mean_avg_entities_per_hyperedge, 5.0);
        assert_eq!(rows[0].accuracy, None);
    }

    #[test]
    fn batch_accuracy_matches_hand_counted_tally() {
        let prompts = PromptSet::builtin();
        // 20 records; TRUE for even indices (10), FALSE for odd, so the
        // hand-computed accuracy is exactly 0.5.
        let fixtures: Vec<(String, u32, u32, String)> = (0..20)
            .map(|i| {
                let verdict = if i % 2 == 0 { "VERDICT: TRUE" } else { "VERDICT: FALSE" };
                ("judge".to_string(), i as u32, 0u32, verdict.to_string())
            })
            .collect();
        let refs: Vec<(&str, u32, u32, &str)> = fixtures
            .iter()
            .map(|(t, s, q, r)| (t.as_str(), *s, *q, r.as_str()))
            .collect();
        let p = provider(&refs);
        let records: Vec<EvalRecord> = (0..20)
            .map(|i| EvalRecord {
                query_id: format!("q{i}"),
                query: format!("question {i}"),
                query_type: None,
                reference: Some("ref".into()),
                predicted: Some("pred".into()),
                trace_dir: None,
                source_passage: None,
            })
            .collect();
        let (rows, summary) = evaluate_records(&records, &p, &prompts, |_| None).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(summary.judged, 20);
        assert_eq!(summary.correct, 10);
        assert_eq!(summary.accuracy, Some(0.5));
    }

    #[test]
    fn unscored_records_are_excluded_and_counted() {
        let prompts = PromptSet::builtin();
        let p = provider(&[
            ("comprehensiveness", 0, 0, "LEVEL: strong\nSCORE: 70"),
            ("diversity", 0, 0, "LEVEL: adequate\nSCORE: 50"),
            // Record 1: diverges twice on comprehensiveness.
            ("comprehensiveness", 1, 0, "no"),
            ("comprehensiveness", 1, 1, "still no"),
            ("diversity", 1, 0, "LEVEL: strong\nSCORE: 60"),
        ]);
        let records: Vec<EvalRecord> = (0..2)
            .map(|i| EvalRecord {
                query_id: format!("g{i}"),
                query: "q".into(),
                query_type: None,
                reference: None,
                predicted: Some("answer".into()),
                trace_dir: None,
                source_passage: Some("passage".into()),
            })
            .collect();
        let (rows, summary) = evaluate_records(&records, &p, &prompts, |_| None).unwrap();
        assert_eq!(rows[0].comprehensiveness, Some(70));
        assert_eq!(rows[1].comprehensiveness, None);
        assert_eq!(summary.unscored_comprehensiveness, 1);
        assert_eq!(summary.unscored_diversity, 0);
        assert_eq!(summary.mean_comprehensiveness, Some(70.0));
        assert_eq!(summary.mean_diversity, Some(55.0));
    }

    #[test]
    fn empty_manifest_yields_empty_report() {
        let prompts = PromptSet::builtin();
        let p = provider(&[]);
        let (rows, summary) = evaluate_records(&[], &p, &prompts, |_| None).unwrap();
        assert!(rows.is_empty());
        assert_eq!(summary.records, 0);
        assert_eq!(summary.accuracy, None);
    }
}
