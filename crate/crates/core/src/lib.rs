//! Anchor-MoE: a mixture-of-experts density regressor whose experts refine a
//! gradient-boosted anchor mean.

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod gbdt;
pub mod metrics;
pub mod moe;
pub mod nn;
pub mod pipeline;
pub mod stats;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
