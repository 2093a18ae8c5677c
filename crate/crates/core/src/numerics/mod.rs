//! Dense arrays, differentiable kernels and the gradient checker.

pub mod gradcheck;
pub mod kernels;
mod matrix;
mod params;
pub mod tape;

pub use gradcheck::{check_params, check_piecewise, check_vector, relative_error, GradCheckConfig, GradCheckReport};
pub use kernels::{activation, layer_norm, sigmoid, softmax, Activation};
pub use matrix::DenseMatrix;
pub use params::{Param, ParamGrads, ParamId, ParamKind, ParamStore};
pub use tape::{NodeGrads, NodeId, Tape};

use crate::error::Result;
use crate::scalar::Scalar;

/// Matrix product, `a.cols == b.rows`.
pub fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    a.matmul(b)
}
