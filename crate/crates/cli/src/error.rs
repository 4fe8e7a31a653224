use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Pipeline { stage: &'static str, source: unlearn_guard::Error },
    Io(std::io::Error),
    Invariant(String),
    BoundFailed(String),
    NeighborMapInfeasible(String),
}

impl CliError {
    pub fn stage(stage: &'static str, source: unlearn_guard::Error) -> Self {
        match source {
            unlearn_guard::Error::NeighborMapInfeasible { .. } => Self::NeighborMapInfeasible(source.to_string()),
            source => Self::Pipeline { stage, source },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Pipeline { .. } | Self::Io(_) | Self::Invariant(_) => 3,
            Self::BoundFailed(_) => 4,
            Self::NeighborMapInfeasible(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Pipeline { stage, source } => write!(f, "stage {stage}: {source}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Invariant(m) => write!(f, "invariant violated: {m}"),
            Self::BoundFailed(m) => write!(f, "bound check failed: {m}"),
            Self::NeighborMapInfeasible(m) => write!(f, "neighbor map infeasible: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}
