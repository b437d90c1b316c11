// SPDX-License-Identifier: Apache-2.0

use crate::graph::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("invalid circuit graph: {}", join_violations(.0))]
    InvalidGraph(Vec<Violation>),

    #[error("cycle detected over cell/net edges through node {node}")]
    Cycle { node: usize },

    #[error("level {level} holds {size} nodes, which is not below the maximum sub-graph size {max_size}")]
    OversizedLevel {
        level: usize,
        size: usize,
        max_size: usize,
    },

    #[error("reassembly: {0}")]
    Reassembly(String),

    #[error("timing: node {node}: {reason}")]
    Timing { node: usize, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
