use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("partition {0} has not been certified")]
    UncertifiedPartition(usize),
    #[error("not an equilibrium: fixed-point residual {residual:.3e}")]
    NotEquilibrium { residual: f64 },
    #[error("equilibrium shift requires affine input gains (channel {channel} is not affine)")]
    UnsupportedAtomForShift { channel: usize },
    #[error("artificial input channel {channel} has |v| = {value:.3e} where its gain vanishes")]
    InconsistentArtificialInput { channel: usize, value: f64 },
    #[error("recovered input channel {channel} = {value:.6} violates its bounds by {excess:.3e}")]
    InputBoxViolation { channel: usize, value: f64, excess: f64 },
    #[error("Riccati iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("R + B'PB is singular")]
    SingularInnerMatrix,
    #[error("terminal set not finitely determined within {0} steps")]
    NotFinitelyDetermined(usize),
    #[error("interiority condition violated: {0}")]
    InteriorityViolated(String),
    #[error("state lies outside the state constraint set (violation {0:.3e})")]
    StateOutsideX(f64),
    #[error("no scenario is feasible at the state reached at k = {k}")]
    InfeasibleState { k: usize },
    #[error("controller exceeded its step budget at k = {k}")]
    BudgetExceeded { k: usize },
    #[error("interior-point method hit the iteration limit ({0})")]
    MaxIter(usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("scenario index out of range: {0}")]
    OutOfRange(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("scenario {mu}: {source}")]
    Scenario { mu: u64, source: Box<Error> },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
