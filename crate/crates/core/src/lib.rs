//! Collaborative video deraining with searched restoration branches.

pub mod alignment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod params;
pub mod rainmodel;
pub mod searchspace;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
