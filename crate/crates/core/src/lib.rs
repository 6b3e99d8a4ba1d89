//! Weakly supervised audio-visual anomaly detection over pre-extracted
//! snippet features.
//!
//! The model fuses visual and audio features with a prefix-tuned cross-modal
//! adapter ([`cfa`]), lifts the fused sequence onto the Lorentz hyperboloid
//! and runs two-branch graph attention on it ([`hlgatt`]), then scores each
//! snippet with a hyperbolic classifier trained by top-k multiple-instance
//! learning ([`classifier`]).

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cfa;
pub mod classifier;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hlgatt;
pub mod lorentz;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
