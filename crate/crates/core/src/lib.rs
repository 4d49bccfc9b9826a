//! Numerical core of the hybrid routing transformer for zero-shot learning.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. It covers
//! dense tensors and a reverse-mode tape, the two capsule routing schemes,
//! the attribute-guided encoder and the static-routing decoder, the
//! three-part training loss with an RMSprop optimizer, synthetic datasets
//! and the per-class evaluation metrics.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod capsule;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod semantics;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
