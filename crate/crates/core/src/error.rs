use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("coefficient `{coefficient}` is not finite at {point:?}")]
    NonFinite {
        coefficient: &'static str,
        point: Vec<f64>,
    },

    #[error("fixed-point iteration did not contract at x={x:?}, z={z:?} ({iterations} iterations, residual {residual:e})")]
    NonContraction {
        x: Vec<f64>,
        z: Vec<f64>,
        iterations: usize,
        residual: f64,
    },

    #[error("jump |z|={norm} is outside the admissible radius r0={r0}")]
    OutsideAdmissibleRadius { norm: f64, r0: f64 },

    #[error("det(1 + D_y p) = {det} is not positive at y={y:?}, z={z:?}")]
    NotInvertible { y: Vec<f64>, z: Vec<f64>, det: f64 },

    #[error("Levy measure violates the integrability condition: beta={beta} must lie in (0, 2)")]
    NonIntegrable { beta: f64 },

    #[error("truncated moment of order {power} diverges for density exponent beta={beta}")]
    DivergentMoment { power: f64, beta: f64 },

    #[error("inner quadrature tail moment {tail:e} exceeds tol {tol:e}; need n_inner >= {required}")]
    Resolution { tail: f64, tol: f64, required: usize },

    #[error("operator assembly failed at node {node}: {source}")]
    Assembly {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("grid mismatch between operands")]
    GridMismatch,

    #[error("linear solver did not converge in {iterations} iterations (residual {residual:e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("time step failed at t={time}: {source}")]
    Step {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("support margin violated: {0}")]
    SupportMargin(String),

    #[error("monte carlo: {flagged} of {total} paths produced non-finite states")]
    TooManyFlagged { flagged: usize, total: usize },

    #[error("no samples fall inside the grid")]
    EmptyDensity,

    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
