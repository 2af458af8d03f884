//! Matrix-free finite element solver for the transient heat equation on
//! structured tetrahedral grids over heterogeneous media.
//!
//! The domain is a box subdivided into cubic cells, each split into six
//! tetrahedra sharing the cell's main diagonal. The time-discrete system
//! (theta scheme) is solved with Jacobi-preconditioned conjugate gradients
//! where the system matrix is never assembled: three interchangeable
//! degree-of-freedom-wise application strategies traverse the element
//! structure directly. A conventional sparse CSR baseline with incomplete
//! Cholesky serves as the correctness oracle and iteration-count comparator,
//! and a Metropolis-Hastings chain drives a corrosion-depth inverse problem
//! on top of the forward solver.

// Index-matched loops over fixed-size matrices and axes are the house style
// here; iterator rewrites of 4x4 kernel math hide the subscript structure.
#![allow(clippy::needless_range_loop)]
// Guards written as `!(x > 0.0)` reject NaN along with the out-of-range
// values; the positive comparison would silently accept it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod elements;
pub mod error;
pub mod inverse;
pub mod materials;
pub mod mesh;
pub mod operator;
pub mod partition;
pub mod pool;
pub mod scalar;
pub mod solver;

pub use error::{ElementError, InverseError, MeshError, PartitionError, SolverError};
pub use scalar::Scalar;
