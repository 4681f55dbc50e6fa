//! Group-specialized convolutional mixture-of-experts with fairness evaluation.
//!
//! - [`tensor`]: reverse-mode autodiff over `f64` tensors.
//! - [`moe`]: MoE conv layers, router scores and inverse-group-size selection probabilities.
//! - [`objectives`]: cross-entropy plus per-layer group/expert mutual information.
//! - [`metrics`]: per-group precision/recall/F1, Eopp0/Eopp1/Eodd and FATE.
//! - [`data`]: seeded synthetic images with a continuous sensitive attribute.

pub mod data;
pub mod error;
pub mod metrics;
pub mod moe;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
