//! Downstream heads, losses and evaluation metrics.

pub mod apr;
pub mod dense;
pub mod metrics;
pub mod pose;
pub mod tiling;
