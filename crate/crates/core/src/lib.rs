//! Cross-table pretrained tabular transformer whose feed-forward layers are
//! calibratable linear layers (CaLinear).
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense tensors, reverse-mode differentiation, layers, AdamW.
//! - [`calinear`]: basis layers whose mixing coefficients come from a context scalar.
//! - [`model`]: the transformer assembly with a shared body and per-dataset parts.
//! - [`data`]: CSV ingestion, quantile preprocessing, splits, synthetic suites.
//! - [`training`]: pretraining, calibration, refinement and checkpoints.
//! - [`eval`]: scoring, rankings, win/tie/loss, coefficient export and reports.

pub mod calinear;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
