#![no_std]
//! Core of a two-party split adaptation system for a small vision transformer.

extern crate alloc;

pub mod adapt;
pub mod attack;
pub mod autograd;
pub mod bytes;
pub mod client;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod optim;
pub mod protocol;
pub mod quant;
pub mod rng;
pub mod server;
pub mod spectral;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
