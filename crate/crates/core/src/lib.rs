//! Cross-view completion pre-training at desk scale.
//!
//! A small reverse-mode tape ([`graph`]) drives the masked two-view
//! transformer ([`model`]); [`pairs`] generates posed view pairs and
//! co-visibility, [`heads`] holds the downstream heads and metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod io;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pairs;
pub mod params;
pub mod patches;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
