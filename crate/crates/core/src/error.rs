// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::circuit::Rule;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum CktError {
    /// Malformed node/edge lists: duplicate ids, dangling edge endpoints.
    #[error("structural error: {0}")]
    Structural(String),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("not a valid circuit: {0:?}")]
    InvalidCircuit(Vec<Rule>),
    #[error("conversion error: {0}")]
    Conversion(String),
    #[error("decomposition error: {0}")]
    Decomposition(String),
    #[error("unknown basis entry id {0}")]
    UnknownEntry(usize),
    #[error("size guard exceeded: {actual} devices > {limit}")]
    SizeGuard { actual: usize, limit: usize },
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CktError {
    /// Short machine-parsable category, used by the CLI and the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            CktError::Structural(_) => "structural",
            CktError::Cycle => "cycle",
            CktError::InvalidCircuit(_) => "invalid-circuit",
            CktError::Conversion(_) => "conversion",
            CktError::Decomposition(_) => "decomposition",
            CktError::UnknownEntry(_) => "unknown-entry",
            CktError::SizeGuard { .. } => "size-guard",
            CktError::Simulation(_) => "simulation",
            CktError::Shape { .. } => "shape",
            CktError::Sampling(_) => "sampling",
            CktError::Format(_) => "format",
            CktError::Config(_) => "config",
            CktError::Numerical(_) => "numerical",
            CktError::Io(_) => "io",
            CktError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = CktError> = std::result::Result<T, E>;
