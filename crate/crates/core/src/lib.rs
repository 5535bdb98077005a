//! Low-rank factored feed-forward networks with differentiable
//! bottleneck-dimension search and mixed-precision weight quantization.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`rng`], [`diff`] — dense math, seeded streams, gradient
//!   checking and Hessian-vector products;
//! * [`model`] — factored layers, forward/backward, SGD training;
//! * [`quant`] — quantization tables, scale fitting, STE/QAT/ADMM training;
//! * [`sensitivity`] — KL and curvature sensitivities and bit allocation;
//! * [`nas`] — Gumbel-softmax super-networks and the two-stage search.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and runs sequentially
//! otherwise. Results do not depend on the worker count.

pub mod data;
pub mod diff;
pub mod error;
pub mod model;
pub mod nas;
pub mod par;
pub mod quant;
pub mod rng;
pub mod sensitivity;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
