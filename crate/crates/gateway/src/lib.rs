//! CLI and HTTP front ends for the datafactory engine.

pub mod cli;
pub mod http;
pub mod service;
