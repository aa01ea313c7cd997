//! Small dense linear algebra: row-major matrices, LU solves and symmetric eigenvalues.

mod eigen;
mod lu;
mod matrix;

pub use eigen::{min_eigenvalue, symmetric_eigenvalues};
pub use lu::{factor_checked, Lu, CONDITION_THRESHOLD};
pub use matrix::Matrix;
