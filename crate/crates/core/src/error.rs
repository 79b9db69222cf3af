use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric is not positive definite (pivot {pivot:.3e} at index {index})")]
    SingularMetric { index: usize, pivot: f64 },

    /// `B` has full row rank, so no annihilator exists and the CCM terms must be skipped.
    #[error("input matrix has full row rank; annihilator is empty")]
    EmptyAnnihilator,

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite value produced at graph node {node}")]
    NumericOverflow { node: usize },

    #[error("non-finite loss for sample {sample}")]
    NonFiniteSample { sample: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("state diverged at t = {time:.4}")]
    Diverged { time: f64 },

    #[error("no feasible nominal trajectory after {attempts} attempts")]
    InfeasibleNominal { attempts: usize },

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("grid of {points:.3e} points exceeds the cap of {cap}")]
    GridTooLarge { points: f64, cap: usize },

    #[error(
        "training diverged at step {step}: loss non-finite for {consecutive} consecutive steps"
    )]
    TrainingDiverged { step: usize, consecutive: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::invalid(msg)
}
