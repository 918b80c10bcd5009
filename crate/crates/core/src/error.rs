use thiserror::Error;

use crate::solver::ConvergenceTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid generator: {0}")]
    InvalidGenerator(String),

    #[error("unbounded generator: {0}")]
    UnboundedGenerator(String),

    #[error("degenerate bounds: {0}")]
    DegenerateBounds(String),

    #[error("ensemble needs {cells} cells, budget is {budget}")]
    ResourceLimit { cells: usize, budget: usize },

    #[error("weight degeneracy: effective sample size {ess:.1} below floor {floor:.1}")]
    WeightDegeneracy { ess: f64, floor: f64 },

    #[error("normal equations are singular at slice {slice}")]
    RankDeficient { slice: usize },

    #[error("generator evaluation is not finite at slice {slice}, path {path}")]
    GeneratorEvaluation { slice: usize, path: usize },

    #[error("terminal sup norm {xi_sup:e} exceeds smallness threshold {threshold:e}")]
    SmallnessViolated { xi_sup: f64, threshold: f64 },

    #[error("no convergence after {} iterations (last distance {:e})", .trace.iterations, .trace.last_distance())]
    NoConvergence { trace: Box<ConvergenceTrace> },

    #[error("splitting needs {needed} pieces, cap is {cap}")]
    TooManyPieces { needed: usize, cap: usize },

    #[error("dominance violated: {0}")]
    DominanceViolated(String),

    #[error("stage {stage}: {source}")]
    Stage { stage: usize, source: Box<Error> },

    #[error("{side} solve: {source}")]
    Side { side: &'static str, source: Box<Error> },

    #[error("malformed ensemble dump: {0}")]
    Decode(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Strips stage/side wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Side { source, .. } => source.root(),
            other => other,
        }
    }
}
