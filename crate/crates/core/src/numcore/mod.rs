//! Tensor substrate: dense arrays, differentiable primitives, RNG,
//! gradient checking and the UVTF file format.

pub mod gradcheck;
pub mod layers;
pub mod nn;
pub mod optim;
mod param;
mod rng;
pub mod sample;
mod scalar;
mod tensor;
pub mod uvtf;

pub use param::{Module, Param};
pub use rng::{Rng, RngPosition};
pub use scalar::Real;
pub use tensor::Tensor;
