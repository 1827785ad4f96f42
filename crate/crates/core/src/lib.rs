//! Bilinear pooling toolkit.
//!
//! The crate covers exact bilinear pooling, its low-rank Hadamard
//! factorization (plain, full-model, nonlinear and shortcut forms), compact
//! bilinear pooling through count sketch and circular convolution, and an
//! attention network built from low-rank pooling. Everything runs on a small
//! dense [`Tensor`] type with a reverse-mode [`Tape`] for gradients.

pub mod attention;
pub mod data;
pub mod error;
pub mod pooling;
pub mod sketch;
pub mod store;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Activation, Rng, Tape, Tensor, Var};
