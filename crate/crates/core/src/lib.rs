//! Spatio-temporal masked-autoencoder pre-training.
//!
//! The crate implements, from the tensor level up: a reverse-mode autodiff
//! tape, conditioned parameter generation from region and time-of-day codes,
//! temporal and spatial hypergraph encoders with capsule-style cluster
//! routing, cluster-aware adaptive masking, the pre-training loop, and a
//! downstream harness that fuses the pre-trained representation into a
//! simple forecasting readout.

pub mod ckpt;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod mask;
pub mod model;
pub mod norm;
pub mod params;
pub mod spatial;
pub mod synthetic;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamBank, ParamId, Session};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
