//! Learning and tracking of sparse, time-varying massive-MIMO virtual
//! channels observed through low-resolution ADCs.
//!
//! The pipeline has four stages:
//!
//! 1. [`channel`] simulates a sparse AR(1) virtual channel and its pilots.
//! 2. [`em`] learns the AR coefficient and per-coefficient variances with an
//!    EM loop whose E-step is Gaussian message passing across blocks combined
//!    with a damped GAMP solver ([`gamp`]) inside each block.
//! 3. [`support`] splits the learned variances into a support set with 1-D
//!    2-means.
//! 4. [`tracker`] follows the reduced channel on that support block by block.
//!
//! [`harness`] drives Monte-Carlo experiments over these stages.

// `!(x > 0.0)` also rejects NaN, which is the point of every such check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod em;
pub mod error;
pub mod gamp;
pub mod harness;
pub mod io;
pub mod metrics;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod quantizer;
pub mod random;
pub mod special;
pub mod support;
pub mod tracker;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use nalgebra::{DMatrix, DVector};

pub use channel::ModelParams;
pub use gamp::{DampingConfig, Measurement};
pub use harness::{ExperimentConfig, Scenario};
pub use quantizer::{Observation, QuantizerSpec};
