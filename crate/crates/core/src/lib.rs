//! Desk-scale visual geo-localization with pair-based self-supervised losses.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] is a small reverse-mode tape over dense `f64` matrices.
//! * [`geodata`] holds geo-referenced samples, radii, and the synthetic generator.
//! * [`sampling`] builds query-positive / identical-negative pairs and mines triplets.
//! * [`encoder`] is the trunk + projection head + predictor + momentum target.
//! * [`losses`] implements the triplet, InfoNCE, embedding-prediction,
//!   Barlow Twins and VICReg objectives.
//! * [`trainer`] runs epochs, Adam updates and multi-seed experiments.
//! * [`retrieval`] does exact kNN and Recall@N.
//! * [`costmodel`] counts extraction / matching work during data preparation.
//! * [`method`] ties everything together as one training strategy.
//! * [`gradcheck`] verifies every method's gradients against finite differences.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod costmodel;
pub mod encoder;
pub mod error;
pub mod geodata;
pub mod gradcheck;
pub mod losses;
pub mod method;
pub mod retrieval;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
