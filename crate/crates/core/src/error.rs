use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("unknown sample id {0}")]
    UnknownId(usize),

    #[error("id sets overlap at sample {0}")]
    OverlappingSplits(usize),

    #[error("duplicate sample id {0}")]
    DuplicateId(usize),

    #[error("parameter derivation failed: {0}")]
    Derivation(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("injective neighbor assignment infeasible for sample {id} (class {class})")]
    NeighborMapInfeasible { id: usize, class: usize },

    #[error("degenerate feature pair ({id}, {neighbor}): output gap {gap:e} with zero feature distance")]
    DegeneratePair { id: usize, neighbor: usize, gap: f64 },

    #[error("all neighbor pairs are degenerate")]
    AllPairsDegenerate,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
