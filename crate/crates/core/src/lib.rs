//! Thermal object detection with two training-only objectives: RoI-level
//! supervised contrastive separation ([`rcs`]) and cross-modal feature
//! guidance from a frozen RGB teacher ([`cmg`]). Both plug into a small
//! anchor-free detector ([`detector`]) built on a hand-derived autodiff core
//! ([`numeric`]). Inference runs the thermal student alone.

// `!(x >= 0.0)` is used on purpose in validation: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod checks;
pub mod cli;
pub mod cmg;
pub mod data;
pub mod detector;
pub mod geometry;
pub mod numeric;
pub mod rcs;
pub mod seed;

pub use error::{Error, Result};
