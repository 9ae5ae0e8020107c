pub mod classifier;
mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod gradcheck;
pub mod napm;
pub mod ode;
pub mod prototype;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Axis, Context, DiffValue, Matrix};
