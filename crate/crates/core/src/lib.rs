pub mod accounting;
pub mod arch;
pub mod error;
pub mod harness;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
