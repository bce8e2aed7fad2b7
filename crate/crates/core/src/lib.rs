//! Spatio-temporal probabilistic transformer core.
//!
//! The numeric layer (tensors, gradient tape, optimizer) is generic over the
//! scalar type; the aliases below fix f64, which every reference configuration
//! uses.

pub mod check;
pub mod error;
pub mod factor_gen;
pub mod latent_ar;
pub mod io;
pub mod synth;
pub mod train;
pub mod verify;
pub mod model;
pub mod priors;
pub mod scalar;
pub mod tensor;

pub use error::{Result, StptError};
pub use scalar::{Scalar, MASKED_BELOW, NEG_SENTINEL};

/// f64-backed tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// f64-backed gradient tape.
pub type Tape64 = tensor::tape::Tape<f64>;
/// f64-backed parameter store.
pub type ParamStore64 = tensor::tape::ParamStore<f64>;
/// f64-backed optimizer state.
pub type Adam64 = tensor::adam::AdamState<f64>;
