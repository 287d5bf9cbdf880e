//! Differentiable cell-based architecture search with a joint classification
//! and masked-image reconstruction objective, on a from-scratch CPU autodiff
//! engine.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod search;
pub mod search_space;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
