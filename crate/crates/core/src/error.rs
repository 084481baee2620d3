use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("row {row} has every entry masked")]
    InfeasibleRow { row: usize },

    #[error("input is not normalized (norm {norm})")]
    Normalization { norm: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("{qubits} qubits exceeds the simulator limit of {limit}")]
    Capacity { qubits: usize, limit: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("infeasible move: {0}")]
    InfeasibleMove(String),

    #[error("execution stagnated: {0}")]
    Stagnation(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
