//! Harness around the matfree solver: strict JSON run configs, a timing
//! sweep with CSV output, simulation and inversion drivers with VTK/JSON
//! artifacts, and self-contained verification suites. The `matfree` binary
//! is a thin clap wrapper over these modules.

// Validation written as `!(x > 0.0)` rejects NaN along with the
// out-of-range values; the positive comparison would silently accept it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod error;
pub mod run;
pub mod verify;
pub mod vtk;

pub use error::CliError;
