//! Tucker-factorized tensor adapters for the attention projections of a
//! transformer, with the multilinear algebra, differentiation engine, rank
//! planning, and a small frozen-backbone testbed needed to train and verify
//! them.

pub mod adapters;
pub mod autograd;
pub mod error;
pub mod parallel;
pub mod planner;
pub mod testbed;
pub mod tensor;
pub mod tucker;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
pub use tucker::TuckerFactors;
