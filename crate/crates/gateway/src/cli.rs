//! Command line adapter. Exit codes: 0 success, 1 domain error, 2 usage.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use datafactory_core::bench::{
    load_dataset, replay_kg_strategy, replay_provider, run_benchmark, BenchConfig, DatasetKind,
};
use datafactory_core::config::EngineConfig;
use datafactory_core::ingest::RawTable;
use datafactory_core::kgbuild::KgConfig;
use datafactory_core::llm::{HttpLlm, LlmPort, ReplayLlm};
use datafactory_core::workspace::Workspace;

use crate::service::{AskRequest, Engine, EventKind, Mode, UnavailableLlm};

#[derive(Debug, Parser)]
#[command(name = "datafactory", version, about = "Question answering over ingested tables")]
pub struct Cli {
    /// Engine configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Database,
    KnowledgeGraph,
    Leader,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Database => Mode::Database,
            ModeArg::KnowledgeGraph => Mode::KnowledgeGraph,
            ModeArg::Leader => Mode::Leader,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load CSV/TSV files into the workspace.
    Ingest {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Table name (single file only); defaults to the file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Build or extend the knowledge graph from a table.
    BuildKg {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long)]
        table: String,
        /// Graph configuration (JSON file).
        #[arg(long)]
        kg_config: Option<PathBuf>,
        /// Ask the LLM for a configuration.
        #[arg(long, conflicts_with = "kg_config")]
        suggest: bool,
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Answer a question and print the final answer.
    Ask {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long, value_enum, default_value = "leader")]
        mode: ModeArg,
        #[arg(long = "q")]
        question: String,
        /// Serve LLM replies from a transcript file.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Write the event trace (JSON) here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a benchmark split and write the report.
    Bench {
        #[arg(long)]
        dataset: DatasetKind,
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        /// Directory of per-instance replay transcripts.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "datafactory")]
        method: String,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn engine_config(path: Option<&Path>) -> anyhow::Result<EngineConfig> {
    match path {
        Some(p) => EngineConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(EngineConfig::default()),
    }
}

fn llm_port(replay: Option<&Path>) -> anyhow::Result<Arc<dyn LlmPort>> {
    if let Some(p) = replay {
        let llm = ReplayLlm::from_file(p).with_context(|| format!("loading transcript {}", p.display()))?;
        return Ok(Arc::new(llm));
    }
    Ok(match HttpLlm::from_env() {
        Ok(llm) => Arc::new(llm),
        Err(e) => Arc::new(UnavailableLlm(e.to_string())),
    })
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".into())
}

pub fn read_table_file(path: &Path, name: Option<&str>) -> anyhow::Result<RawTable> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let is_tsv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
    let name = name.map_or_else(|| file_stem(path), str::to_string);
    Ok(RawTable::from_delimited(
        &name,
        &bytes,
        if is_tsv { b'\t' } else { b',' },
    )?)
}

fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = engine_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { workspace, files, name } => {
            if name.is_some() && files.len() > 1 {
                bail!("--name applies to a single file");
            }
            let ws = Workspace::open(&workspace, cfg)?;
            for f in &files {
                let raw = read_table_file(f, name.as_deref())?;
                let report = ws.ingest(&raw, None)?;
                writeln!(out, "{}: {} rows", report.table, report.quality.row_count)?;
            }
        }
        Command::BuildKg {
            workspace,
            table,
            kg_config,
            suggest,
            replay,
        } => {
            let ws = Workspace::open(&workspace, cfg)?;
            let config = kg_config
                .map(|p| -> anyhow::Result<KgConfig> {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    Ok(KgConfig::from_json(&text)?)
                })
                .transpose()?;
            let llm = if suggest {
                Some(llm_port(replay.as_deref())?)
            } else {
                None
            };
            let report = ws.build_kg(&table, config, llm.as_deref())?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Ask {
            workspace,
            mode,
            question,
            replay,
            trace,
        } => {
            let llm = llm_port(replay.as_deref())?;
            let engine = Arc::new(Engine::new(Workspace::open(&workspace, cfg)?, llm));
            let outcome = engine.ask_blocking(AskRequest {
                question,
                mode: mode.into(),
                session_id: None,
            })?;
            if let Some(p) = trace {
                let doc = serde_json::json!({"events": outcome.events, "trace": outcome.trace});
                std::fs::write(&p, serde_json::to_string_pretty(&doc)? + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(e) = outcome
                .events
                .iter()
                .find(|e| e.kind == EventKind::Error && e.payload.get("step").is_none())
            {
                bail!("{}", e.payload["message"].as_str().unwrap_or("session failed"));
            }
            writeln!(out, "{}", outcome.final_text.unwrap_or_default())?;
        }
        Command::Bench {
            dataset,
            path,
            limit,
            replay,
            out: out_path,
            method,
        } => {
            let instances = load_dataset(dataset, &path, limit)?;
            let mut bc = BenchConfig {
                method,
                engine: cfg,
                ..BenchConfig::default()
            };
            let report = match replay {
                Some(dir) => {
                    bc.kg = replay_kg_strategy(&dir)?;
                    run_benchmark(dataset, &instances, &bc, &replay_provider(dir))
                }
                None => {
                    let llm = llm_port(None)?;
                    run_benchmark(dataset, &instances, &bc, &move |_| Ok(Arc::clone(&llm)))
                }
            };
            std::fs::write(&out_path, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", out_path.display()))?;
            writeln!(
                out,
                "{} {}: n={} failed={} metrics={}",
                report.method,
                dataset.name(),
                report.n,
                report.failed,
                serde_json::to_string(&report.metrics)?
            )?;
        }
        Command::Serve {
            workspace,
            port,
            replay,
        } => {
            let llm = llm_port(replay.as_deref())?;
            let engine = Arc::new(Engine::new(Workspace::open(&workspace, cfg)?, llm));
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, crate::http::router(engine)).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
