//! Prompt templates and scoring assets.
//!
//! Templates live as text assets, not code; the files under
//! `assets/prompts/` are compiled in as defaults and any of them can be
//! overridden from a directory named in the project config. The tagged
//! output grammar the templates ask for is a project convention — the
//! files document it to the model, `parse` enforces it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// The two-step scoring asset: graded levels plus the grading template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringAsset {
    pub dimension: String,
    pub levels: Vec<ScoreLevel>,
    pub template: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreLevel {
    pub name: String,
    pub min: u32,
    pub max: u32,
    #[serde(default)]
    pub meaning: String,
}

impl ScoringAsset {
    pub fn level(&self, name: &str) -> Option<&ScoreLevel> {
        self.levels
            .iter()
            .find(|l| l.name.eq_ignore_ascii_case(name))
    }

    /// The levels rendered for the grading prompt.
    pub fn levels_text(&self) -> String {
        self.levels
            .iter()
            .map(|l| format!("- {} ({}-{}): {}", l.name, l.min, l.max, l.meaning))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// All prompt templates used by the engine.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub extract: String,
    pub summarize: String,
    pub sufficiency: String,
    pub concerns: String,
    pub subqueries: String,
    pub memory_delta: String,
    pub merge_description: String,
    pub answer: String,
    pub judge: String,
    pub comprehensiveness: ScoringAsset,
    pub diversity: ScoringAsset,
}

impl PromptSet {
    /// The compiled-in defaults.
    pub fn builtin() -> Self {
        Self {
            extract: include_str!("../assets/prompts/extract.txt").to_string(),
            summarize: include_str!("../assets/prompts/summarize.txt").to_string(),
            sufficiency: include_str!("../assets/prompts/sufficiency.txt").to_string(),
            concerns: include_str!("../assets/prompts/concerns.txt").to_string(),
            subqueries: include_str!("../assets/prompts/subqueries.txt").to_string(),
            memory_delta: include_str!("../assets/prompts/memory_delta.txt").to_string(),
            merge_description: include_str!("../assets/prompts/merge_description.txt").to_string(),
            answer: include_str!("../assets/prompts/answer.txt").to_string(),
            judge: include_str!("../assets/prompts/judge.txt").to_string(),
            comprehensiveness: serde_json::from_str(include_str!(
                "../assets/prompts/comprehensiveness.json"
            ))
            .expect("builtin scoring asset is valid"),
            diversity: serde_json::from_str(include_str!("../assets/prompts/diversity.json"))
                .expect("builtin scoring asset is valid"),
        }
    }

    /// Builtin templates with per-file overrides from a directory. Only
    /// files that exist there replace their builtin counterpart.
    pub fn load_with_overrides(dir: &Path) -> Result<Self> {
        let mut set = Self::builtin();
        for (name, slot) in [
            ("extract.txt", &mut set.extract),
            ("summarize.txt", &mut set.summarize),
            ("sufficiency.txt", &mut set.sufficiency),
            ("concerns.txt", &mut set.concerns),
            ("subqueries.txt", &mut set.subqueries),
            ("memory_delta.txt", &mut set.memory_delta),
            ("merge_description.txt", &mut set.merge_description),
            ("answer.txt", &mut set.answer),
            ("judge.txt", &mut set.judge),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)?;
            }
        }
        for (name, slot) in [
            ("comprehensiveness.json", &mut set.comprehensiveness),
            ("diversity.json", &mut set.diversity),
        ] {
            let path = dir.join(name);
            if path.exists() {
                let raw = std::fs::read_to_string(&path)?;
                *slot = serde_json::from_str(&raw).map_err(|e| EngineError::CorruptStore {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
            }
        }
        Ok(set)
    }
}

/// Fills `{{name}}` placeholders.
pub fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in pairs {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_assets_load_and_fill() {
        let set = PromptSet::builtin();
        assert!(set.extract.contains("{{chunk_text}}"));
        assert!(set.sufficiency.contains("SUFFICIENT"));
        assert_eq!(set.comprehensiveness.levels.len(), 5);
        assert_eq!(set.diversity.levels.len(), 5);

        let filled = fill(&set.sufficiency, &[("target_query", "why?"), ("memory", "(none)")]);
        assert!(filled.contains("why?"));
        assert!(!filled.contains("{{target_query}}"));
    }

    #[test]
    fn scoring_levels_partition_0_to_100() {
        for asset in [
            PromptSet::builtin().comprehensiveness,
            PromptSet::builtin().diversity,
        ] {
            let mut expected_min = 0;
            for level in &asset.levels {
                assert_eq!(level.min, expected_min, "level {} min", level.name);
                assert!(level.max >= level.min);
                expected_min = level.max + 1;
            }
            assert_eq!(expected_min, 101);
            assert!(asset.level("STRONG").is_some(), "case-insensitive lookup");
        }
    }

    #[test]
    fn override_directory_replaces_only_present_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("judge.txt"), "custom judge {{prediction}}").unwrap();
        let set = PromptSet::load_with_overrides(dir.path()).unwrap();
        assert_eq!(set.judge, "custom judge {{prediction}}");
        assert_eq!(set.extract, PromptSet::builtin().extract);
    }
}
