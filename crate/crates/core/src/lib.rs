//! Table question answering over a relational store and a knowledge graph
//! built from the same tables, coordinated by a ReAct-style leader.

pub mod agents;
pub mod bench;
pub mod config;
pub mod graphquery;
pub mod ingest;
pub mod kgbuild;
pub mod leader;
pub mod llm;
pub mod memory;
pub mod relstore;
pub mod value;
pub mod workspace;
