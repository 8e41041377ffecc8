pub mod arch;
pub mod cascade;
pub mod cost;
pub mod data;
pub mod error;
pub mod model_file;
pub mod ops;
pub mod quant;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{GradientTape, Gradients, Var};
pub use tensor::{Scalar, Tensor};
