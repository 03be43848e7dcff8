//! The shared state a session works against: the relational store, the
//! knowledge graph built from its tables, the QA memory and the settings.

use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard};

use serde::Serialize;
use thiserror::Error;

use crate::config::EngineConfig;
use crate::graphquery::{self, EvalLimits, GraphSchema, QueryError, QueryOutput, SubgraphView};
use crate::ingest::{self, CleanRows, IngestError, IngestReport, RawTable};
use crate::kgbuild::{self, BuildOptions, KgConfig, KgError, KnowledgeGraph};
use crate::llm::LlmPort;
use crate::memory::{Embedder, HashEmbedder, MemoryError, QaMemory};
use crate::relstore::{RelStore, StoreError};

const STORE_FILE: &str = "store.sqlite";
const GRAPH_FILE: &str = "graph.json";
const MEMORY_FILE: &str = "memory.jsonl";
/// Rows shown to the LLM when it proposes a graph configuration.
const SUGGESTION_SAMPLE_ROWS: usize = 5;

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Graph(#[from] KgError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{0}")]
    Io(String),
}

/// Where timestamps come from. Fixed clocks keep fixtures reproducible.
#[derive(Debug, Clone, PartialEq)]
pub enum Clock {
    System,
    Fixed(String),
}

impl Clock {
    pub fn now(&self) -> String {
        match self {
            Clock::System => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            Clock::Fixed(t) => t.clone(),
        }
    }
}

/// How a graph configuration was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigSource {
    Supplied,
    Suggested,
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KgBuildReport {
    pub table: String,
    pub config_source: ConfigSource,
    pub config: KgConfig,
    pub nodes_added: usize,
    pub edges_added: usize,
    pub nodes: usize,
    pub edges: usize,
}

pub struct Workspace {
    pub store: RelStore,
    graph: RwLock<KnowledgeGraph>,
    pub memory: QaMemory,
    pub embedder: Box<dyn Embedder>,
    pub config: EngineConfig,
    pub clock: Clock,
    dir: Option<PathBuf>,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace")
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

impl Workspace {
    pub fn in_memory(config: EngineConfig) -> Result<Self, WorkspaceError> {
        Ok(Self {
            store: RelStore::in_memory()?,
            graph: RwLock::new(KnowledgeGraph::new()),
            memory: QaMemory::in_memory(config.memory_settings()),
            embedder: Box::new(HashEmbedder::new(config.retrieval.dim)),
            config,
            clock: Clock::System,
            dir: None,
        })
    }

    /// Opens (creating if needed) a workspace persisted under `dir`.
    pub fn open(dir: &Path, config: EngineConfig) -> Result<Self, WorkspaceError> {
        std::fs::create_dir_all(dir).map_err(|e| WorkspaceError::Io(format!("{}: {e}", dir.display())))?;
        let graph_path = dir.join(GRAPH_FILE);
        let graph = if graph_path.exists() {
            let text = std::fs::read_to_string(&graph_path)
                .map_err(|e| WorkspaceError::Io(format!("{}: {e}", graph_path.display())))?;
            serde_json::from_str(&text).map_err(|e| WorkspaceError::Io(format!("{}: {e}", graph_path.display())))?
        } else {
            KnowledgeGraph::new()
        };
        Ok(Self {
            store: RelStore::open(&dir.join(STORE_FILE))?,
            graph: RwLock::new(graph),
            memory: QaMemory::open(&dir.join(MEMORY_FILE), config.memory_settings())?,
            embedder: Box::new(HashEmbedder::new(config.retrieval.dim)),
            config,
            clock: Clock::System,
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn graph(&self) -> RwLockReadGuard<'_, KnowledgeGraph> {
        self.graph.read().expect("graph lock poisoned")
    }

    pub fn has_data(&self) -> Result<bool, WorkspaceError> {
        Ok(!self.store.table_names()?.is_empty())
    }

    pub fn ingest(&self, raw: &RawTable, llm_hint: Option<&dyn LlmPort>) -> Result<IngestReport, WorkspaceError> {
        Ok(ingest::ingest_table_with(raw, &self.store, llm_hint)?.0)
    }

    /// Builds a graph from a stored table and merges it into the workspace
    /// graph. Without a supplied config, asks the LLM when one is given and
    /// otherwise falls back to the default configuration.
    pub fn build_kg(
        &self,
        table: &str,
        config: Option<KgConfig>,
        llm: Option<&dyn LlmPort>,
    ) -> Result<KgBuildReport, WorkspaceError> {
        let schema = self.store.introspect(table)?;
        let data = self.store.read_table(&schema.table_name)?;
        let data = CleanRows {
            columns: data.columns,
            rows: data.rows,
        };
        let (config, config_source) = match (config, llm) {
            (Some(c), _) => (c, ConfigSource::Supplied),
            (None, Some(llm)) => {
                let sample: Vec<_> = data.rows.iter().take(SUGGESTION_SAMPLE_ROWS).cloned().collect();
                (kgbuild::suggest_config(&schema, &sample, llm)?, ConfigSource::Suggested)
            }
            (None, None) => (kgbuild::default_config(&schema), ConfigSource::Default),
        };
        let opts = BuildOptions {
            created_at: self.clock.now(),
            ..BuildOptions::default()
        };
        let built = kgbuild::build_graph(&schema, &data, &config, self.embedder.as_ref(), &opts)?;
        let mut graph = self.graph.write().expect("graph lock poisoned");
        let (n0, e0) = (graph.node_count(), graph.edge_count());
        let mut merged = graph.clone();
        merged.merge_graph(&built)?;
        *graph = merged;
        let report = KgBuildReport {
            table: schema.table_name.clone(),
            config_source,
            config,
            nodes_added: graph.node_count() - n0,
            edges_added: graph.edge_count() - e0,
            nodes: graph.node_count(),
            edges: graph.edge_count(),
        };
        self.save_graph(&graph)?;
        Ok(report)
    }

    fn save_graph(&self, graph: &KnowledgeGraph) -> Result<(), WorkspaceError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(GRAPH_FILE);
        let tmp = dir.join(format!("{GRAPH_FILE}.tmp"));
        let text = serde_json::to_string(graph).map_err(|e| WorkspaceError::Io(e.to_string()))?;
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| WorkspaceError::Io(format!("{}: {e}", path.display())))
    }

    pub fn graph_schema(&self) -> GraphSchema {
        graphquery::introspect(&self.graph())
    }

    pub fn query_graph(&self, cypher: &str) -> Result<QueryOutput, WorkspaceError> {
        let q = graphquery::parse_cypher(cypher)?;
        Ok(graphquery::eval_query_with(&self.graph(), &q, &EvalLimits::default())?)
    }

    pub fn subgraph(&self, ids: &[String], radius: usize) -> SubgraphView {
        graphquery::extract_subgraph(&self.graph(), ids, radius)
    }

    /// Table DDL followed by the graph schema, as shown to the leader.
    pub fn overview(&self) -> Result<String, WorkspaceError> {
        let mut out = String::from("Relational tables:\n");
        for ddl in self.store.schema_ddl()? {
            out.push_str(&ddl);
            out.push('\n');
        }
        out.push_str("\nKnowledge graph:\n");
        out.push_str(&self.graph_schema().render());
        Ok(out)
    }
}
