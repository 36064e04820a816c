//! Project configuration: one TOML file holding paths, chunking,
//! extraction, session, and provider settings. Secrets come from
//! environment variables only; the config names the variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizerSpec;
use crate::embedding::{EmbeddingProvider, HttpEmbedder, ScriptedEmbedder};
use crate::error::{EngineError, Result};
use crate::llm::{ChatProvider, HttpChatProvider, ScriptedChatProvider};
use crate::orchestrator::SessionConfig;
use crate::prompts::PromptSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub paths: PathsConfig,
    pub chunking: ChunkingConfig,
    pub extraction: ExtractionConfig,
    pub session: SessionConfig,
    pub provider: ProvidersConfig,
    pub prompts: PromptsConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            chunking: ChunkingConfig::default(),
            extraction: ExtractionConfig::default(),
            session: SessionConfig::default(),
            provider: ProvidersConfig::default(),
            prompts: PromptsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub index: PathBuf,
    pub traces: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            index: "index".into(),
            traces: "traces".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    pub tokenizer: TokenizerSpec,
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerSpec::default(),
            chunk_size: 200,
            overlap: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub max_retries: u32,
    pub max_description_fragments: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            max_retries: 2,
            max_description_fragments: 8,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ProvidersConfig {
    pub chat: ChatProviderConfig,
    pub embedding: EmbeddingProviderConfig,
    /// Judge for evaluation; falls back to `chat` when absent.
    pub judge: Option<ChatProviderConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatProviderConfig {
    pub kind: ProviderKind,
    /// Fixture file for the scripted provider.
    pub fixture: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ChatProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Scripted,
            fixture: None,
            base_url: "https://api.openai.com".into(),
            model: "gpt-4o".into(),
            api_key_env: "HYPERMEM_API_KEY".into(),
            temperature: 0.8,
            max_output_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    pub fixture: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Scripted,
            fixture: None,
            base_url: "https://api.openai.com".into(),
            model: "bge-m3".into(),
            api_key_env: "HYPERMEM_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptsConfig {
    /// Directory of template overrides; builtin assets otherwise.
    pub dir: Option<PathBuf>,
}

impl ProjectConfig {
    /// Loads and validates a config file. Relative paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: ProjectConfig = toml::from_str(&raw)
            .map_err(|e| EngineError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.corpus,
            &mut self.paths.index,
            &mut self.paths.traces,
        ] {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        for fixture in [
            &mut self.provider.chat.fixture,
            &mut self.provider.embedding.fixture,
        ] {
            if let Some(f) = fixture {
                if f.is_relative() {
                    *f = base.join(&f);
                }
            }
        }
        if let Some(judge) = &mut self.provider.judge {
            if let Some(f) = &mut judge.fixture {
                if f.is_relative() {
                    *f = base.join(&f);
                }
            }
        }
        if let Some(dir) = &mut self.prompts.dir {
            if dir.is_relative() {
                *dir = base.join(&dir);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunking.overlap >= self.chunking.chunk_size {
            return Err(EngineError::Config(format!(
                "chunking.overlap ({}) must be smaller than chunking.chunk_size ({})",
                self.chunking.overlap, self.chunking.chunk_size
            )));
        }
        self.session.validate()?;
        for (label, provider) in [
            ("provider.chat", &self.provider.chat),
            ("provider.judge", self.provider.judge.as_ref().unwrap_or(&self.provider.chat)),
        ] {
            if provider.kind == ProviderKind::Scripted && provider.fixture.is_none() {
                return Err(EngineError::Config(format!(
                    "{label}: scripted provider needs a fixture path"
                )));
            }
        }
        if self.provider.embedding.kind == ProviderKind::Scripted
            && self.provider.embedding.fixture.is_none()
        {
            return Err(EngineError::Config(
                "provider.embedding: scripted provider needs a fixture path".into(),
            ));
        }
        Ok(())
    }

    pub fn build_chat_provider(&self) -> Result<Box<dyn ChatProvider>> {
        build_chat(&self.provider.chat)
    }

    pub fn build_judge_provider(&self) -> Result<Box<dyn ChatProvider>> {
        build_chat(self.provider.judge.as_ref().unwrap_or(&self.provider.chat))
    }

    pub fn build_embedder(&self) -> Result<Box<dyn EmbeddingProvider>> {
        let cfg = &self.provider.embedding;
        match cfg.kind {
            ProviderKind::Scripted => {
                let fixture = cfg
                    .fixture
                    .as_ref()
                    .ok_or_else(|| EngineError::Config("embedding fixture missing".into()))?;
                Ok(Box::new(ScriptedEmbedder::load(fixture)?))
            }
            ProviderKind::Http => {
                let key = std::env::var(&cfg.api_key_env).ok();
                Ok(Box::new(HttpEmbedder::connect(&cfg.base_url, &cfg.model, key)?))
            }
        }
    }

    pub fn load_prompts(&self) -> Result<PromptSet> {
        match &self.prompts.dir {
            Some(dir) => PromptSet::load_with_overrides(dir),
            None => Ok(PromptSet::builtin()),
        }
    }
}

fn build_chat(cfg: &ChatProviderConfig) -> Result<Box<dyn ChatProvider>> {
    match cfg.kind {
        ProviderKind::Scripted => {
            let fixture = cfg
                .fixture
                .as_ref()
                .ok_or_else(|| EngineError::Config("chat fixture missing".into()))?;
            Ok(Box::new(ScriptedChatProvider::load(fixture)?))
        }
        ProviderKind::Http => {
            let key = std::env::var(&cfg.api_key_env).ok();
            Ok(Box::new(HttpChatProvider::new(&cfg.base_url, &cfg.model, key)))
        }
    }
}
