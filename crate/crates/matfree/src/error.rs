use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("divisions must all be at least 1, got {0:?}")]
    EmptyAxis([u32; 3]),
    #[error("bounds_max must exceed bounds_min on every axis: {min:?} vs {max:?}")]
    DegenerateBounds { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElementError {
    #[error("degenerate tetrahedron: |signed volume| {volume:.3e} below {threshold:.3e}")]
    Degenerate { volume: f64, threshold: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("conjugate gradient breakdown at iteration {iteration}: d'Ad = {curvature:.6e} <= 0")]
    Breakdown { iteration: usize, curvature: f64 },
    #[error(
        "conjugate gradient did not converge: {iterations} iterations, delta {delta:.6e} vs threshold {threshold:.6e}"
    )]
    NonConvergence {
        iterations: usize,
        delta: f64,
        threshold: f64,
    },
    #[error("operand length mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("split fraction {fraction} leaves worker {worker} with {layers} owned layers (need >= 2)")]
    TooFewLayers {
        fraction: f64,
        worker: usize,
        layers: usize,
    },
    #[error("partitioned run needs at least 4 vertex layers, grid has {0}")]
    GridTooShallow(usize),
    #[error("worker {worker} panicked")]
    WorkerPanic { worker: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("incomplete Cholesky pivot stayed non-positive at row {row} after {retries} diagonal shifts (last shift {shift:.3e})")]
    IndefinitePivot {
        row: usize,
        retries: usize,
        shift: f64,
    },
    #[error("dense oracle path is limited to 1000 unknowns, got {0}")]
    TooLargeForDense(usize),
    #[error("dense Cholesky failed at row {0}: matrix not positive definite")]
    DenseNotSpd(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InverseError {
    #[error("camera pitch {pitch} does not tile the {axis} extent {extent}")]
    PitchDoesNotTile {
        pitch: f64,
        extent: f64,
        axis: char,
    },
    #[error("forward model failed for proposal {proposal}: {source}")]
    Forward {
        proposal: f64,
        #[source]
        source: SolverError,
    },
    #[error("chain needs a positive proposal sigma, got {0}")]
    BadProposal(f64),
    #[error("prior interval is empty: [{lo}, {hi}]")]
    EmptyPrior { lo: f64, hi: f64 },
}
