//! Estimation of directed effective connectivity from resting-state BOLD
//! series with a linear neuronal model, FIR hemodynamics and white or
//! autoregressive endogenous fluctuations.

pub mod balloon;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod hemo;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod serde_util;
pub mod ssm;

pub use error::{Error, Result};
