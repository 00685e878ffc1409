//! Probabilistic answer ranking for visual dialog.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode autodiff tape, seeded
//!   random streams and finite-difference gradient checks.
//! - [`bayes`]: dropout-as-Bayesian layers and Monte-Carlo predictive sampling.
//! - [`fusion`]: image/text encoders and spatial attention fusion.
//! - [`decoder`]: Gaussian answer latents, the diversity loss and an LSTM
//!   answer decoder.
//! - [`uncertainty`]: logit/variance heads, the distorted-logit loss family
//!   and the reverse-uncertainty attention rewrite.
//! - [`metrics`]: retrieval metrics and singular-value diversity.
//! - [`data`]: a seeded synthetic dialog task, JSON loading and batching.
//! - [`train`]: the full model, the combined cost, Adam, ablations and reports.

pub mod bayes;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{Graph, RngStream, Tensor, Var};
