use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("crossed book at sequence {sequence}: bid {bid} > ask {ask}")]
    CrossedBook { sequence: u64, bid: f64, ask: f64 },

    #[error("events out of order at sequence {sequence}: {reason}")]
    Unsorted { sequence: u64, reason: String },

    #[error("event at sequence {sequence} has timestamp {timestamp} outside the session")]
    OutOfSession { sequence: u64, timestamp: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate window: {0}")]
    DegenerateWindow(String),

    #[error("state {state} has {count} residuals, at least {required} are needed")]
    InsufficientSample { state: usize, count: usize, required: usize },

    #[error("order condition violated: {states} state(s), at least 2 are needed")]
    OrderCondition { states: usize },

    #[error("rank condition fails for states ({0}, {1}), normalized determinant {2:.3e}")]
    RankCondition(usize, usize, f64),

    #[error("no admissible root; roots {roots:?} as (re, im) of b_r")]
    IdentificationFailure { roots: [(f64, f64); 2] },

    #[error("GMM did not converge after restarts, best objective {best_objective:.6e}")]
    Convergence { best_objective: f64 },

    #[error("parameter {parameter} pinned at the boundary (value {value:.3e})")]
    Boundary { parameter: String, value: f64 },

    #[error("structural matrix B is singular (1 - b_r b_f = {0:.3e})")]
    StructuralSingularity(f64),

    #[error("regressors are collinear, dependent columns {columns:?}")]
    Collinearity { columns: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            line,
            message: e.to_string(),
        }
    }
}
