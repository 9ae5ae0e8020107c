//! Dense matrices and scoped reverse-mode differentiation.

mod attention;
mod autodiff;
mod matrix;

pub use attention::AttentionLayout;
pub use autodiff::{Context, DiffValue};
pub use matrix::{l2_normalize_rows, matmul, sigmoid, softmax_axis, softmax_row_blocks, Axis, Matrix, ZERO_ROW_NORM};
pub(crate) use matrix::sigmoid_scalar;
