//! Locality-aware multi-prompt fusion for visual in-context learning.
//!
//! The crate is `no_std` (with `alloc`) and carries every numerical piece of
//! the pipeline:
//!
//! * [`tensor`]: dense arrays, a reverse-mode tape and the SGD/Adam steps.
//! * [`locality`]: Gaussian/Laplacian spatial priors and the query-conditioned
//!   sigma head.
//! * [`fusion`]: patch embedding, self alignment, locality-enhanced
//!   cross-attention and canvas assembly.
//! * [`backbone`]: the frozen inpainting surrogate (transformer encoder over
//!   canvas tokens plus a vector-quantized patch autoencoder).
//! * [`losses`]: label prediction, semantic integrity and utilization
//!   objectives and their weighted sum.
//! * [`data`]: synthetic task generators, pixel retrieval and prompt
//!   substitution.
//! * [`schedule`] and [`metrics`]: learning-rate schedule and IoU/MSE scoring.
//!
//! File formats, the training loop and the CLI live in the `prompthub` crate.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` guards are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod backbone;
pub mod canvas;
pub mod data;
pub mod error;
pub mod fusion;
pub mod locality;
pub mod losses;
pub mod metrics;
mod nn;
pub mod pipeline;
pub mod real;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
