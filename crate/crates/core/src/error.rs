use thiserror::Error;

use crate::mesh::MeshError;

/// Axis of a rank-4 `[B, H, S, D]` tensor, used to name shape mismatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Batch,
    Head,
    Seq,
    Dim,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Axis::Batch => "batch",
            Axis::Head => "head",
            Axis::Seq => "sequence",
            Axis::Dim => "head_dim",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis} axis: expected {expected}, found {found}")]
    Shape { axis: Axis, expected: usize, found: usize },

    #[error("data length {found} does not match shape volume {expected}")]
    DataLength { expected: usize, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("{axis} length {len} is not divisible by {parts}")]
    Indivisible { axis: Axis, len: usize, parts: usize },

    #[error("shards do not tile the sequence: {0}")]
    Coverage(String),

    #[error(transparent)]
    Mesh(#[from] MeshError),

    #[error("malformed wire payload: {0}")]
    Wire(String),

    #[error("protocol violation on rank {rank}: {message}")]
    Protocol { rank: usize, message: String },

    #[error("deadlock: no worker can make progress; stalled: {}", stalled.join("; "))]
    Deadlock { stalled: Vec<String> },

    #[error("scheduler step budget of {budget} exhausted; stalled: {}", stalled.join("; "))]
    StepBudget { budget: u64, stalled: Vec<String> },

    #[error("worker {rank} failed: {source}")]
    WorkerFailed {
        rank: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("panic: {0}")]
    Panic(String),

    #[error("run aborted after a failure on another worker")]
    Aborted,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
