pub mod aquant;
pub mod autodiff;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod model;
pub mod optim;
pub mod packed;
pub mod ptq;
pub mod runtime;
pub mod tensor;
pub mod wquant;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
