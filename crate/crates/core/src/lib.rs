//! Two-stage Mixture-of-LoRA time-series forecasting.
//!
//! A short-horizon foundation model is pre-trained and frozen, then adapted
//! per forecast segment with a shared pool of LoRA experts mixed by learnable
//! simplex weights. The crate also carries the autoregressive and
//! multi-output baselines and numerical checks for the linear-decoder
//! expressiveness bottleneck.

pub mod adapt;
pub mod analysis;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Mat;
