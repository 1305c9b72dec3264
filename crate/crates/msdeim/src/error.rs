use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid sizes: need at least 2 coarse blocks and 2 fine squares per block, got ({n_coarse}, {n_sub})")]
    GridTooSmall { n_coarse: usize, n_sub: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-positive coefficient {value} on element {element}")]
    NonPositiveCoefficient { element: usize, value: f64 },

    #[error("non-finite nonlinear value at node {node} (u = {u})")]
    NonFiniteValue { node: usize, u: f64 },

    #[error("near-singular denominator at node {node} (|1 + sin| = {magnitude:.3e})")]
    NearSingular { node: usize, magnitude: f64 },

    #[error("linear solver did not converge in {iterations} iterations (relative residual {residual:.3e}, history tail {history:?})")]
    SolverDiverged {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("Newton iteration diverged after {iterations} iterations (last |dz| = {last_step:.3e})")]
    NewtonDiverged { iterations: usize, last_step: f64 },

    #[error("requested {requested} modes but snapshot rank is {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("empty snapshot set: {context}")]
    EmptySnapshots { context: &'static str },

    #[error("degenerate basis column for coarse node {node} (zero after partition-of-unity weighting)")]
    DegenerateColumn { node: usize },

    #[error("local eigenproblem failed on region {region}: {detail}")]
    Eigenproblem { region: usize, detail: String },

    #[error("artifact bundle mismatch: {0}")]
    BundleMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
