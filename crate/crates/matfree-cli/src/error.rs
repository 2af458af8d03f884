//! Errors surfaced by the command-line harness, each with enough context
//! to act on (the offending path, value, or suite).

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} is not a valid run configuration: {source}")]
    Config {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("bad configuration: {0}")]
    Invalid(String),
    #[error("{path} is not a structured-points file: {reason}")]
    VtkFormat { path: PathBuf, reason: String },
    #[error("verification failed: {failed} of {total} suites")]
    VerifyFailed { failed: usize, total: usize },
    #[error(transparent)]
    Mesh(#[from] matfree::MeshError),
    #[error(transparent)]
    Solver(#[from] matfree::SolverError),
    #[error(transparent)]
    Partition(#[from] matfree::PartitionError),
    #[error(transparent)]
    Inverse(#[from] matfree::InverseError),
}
