//! Engine settings, loadable from TOML. Every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{DEFAULT_ALPHA, DEFAULT_DIM, DEFAULT_K};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            temperature: crate::llm::DEFAULT_TEMPERATURE,
            max_tokens: crate::llm::DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub dim: usize,
    pub alpha: f64,
    pub k: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSettings {
    /// Rows of a result shown to the analysis prompt.
    pub row_cap: usize,
    /// Extra generation rounds after a failed validation.
    pub repair_budget: u32,
    /// Rows shown in observation digests.
    pub digest_rows: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            row_cap: 50,
            repair_budget: 1,
            digest_rows: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeaderSettings {
    pub max_steps: usize,
    pub clarification_enabled: bool,
    pub arbitration_enabled: bool,
    /// Observations older than this many turns are shown as digests.
    pub full_history_turns: usize,
}

impl Default for LeaderSettings {
    fn default() -> Self {
        Self {
            max_steps: 20,
            clarification_enabled: true,
            arbitration_enabled: true,
            full_history_turns: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub llm: LlmSettings,
    pub retrieval: RetrievalSettings,
    pub agents: AgentSettings,
    pub leader: LeaderSettings,
    /// Inline domain knowledge injected into generation prompts.
    pub domain_knowledge: Option<String>,
    /// File holding domain knowledge; read at load time, relative to the
    /// config file.
    pub domain_knowledge_file: Option<PathBuf>,
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: EngineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let io = |source, path: &Path| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e, path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(rel) = cfg.domain_knowledge_file.take() {
            let full = path.parent().unwrap_or(Path::new(".")).join(rel);
            let dk = std::fs::read_to_string(&full).map_err(|e| io(e, &full))?;
            cfg.domain_knowledge = Some(match cfg.domain_knowledge.take() {
                Some(inline) => format!("{inline}\n{dk}"),
                None => dk,
            });
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.llm.temperature.is_nan() || self.llm.temperature < 0.0 {
            return bad("llm.temperature must be >= 0");
        }
        if self.retrieval.dim == 0 {
            return bad("retrieval.dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.retrieval.alpha) {
            return bad("retrieval.alpha must lie in [0, 1]");
        }
        if self.leader.max_steps == 0 {
            return bad("leader.max_steps must be at least 1");
        }
        Ok(())
    }

    pub fn memory_settings(&self) -> crate::memory::MemorySettings {
        crate::memory::MemorySettings {
            dim: self.retrieval.dim,
            alpha: self.retrieval.alpha,
            k: self.retrieval.k,
        }
    }
}
