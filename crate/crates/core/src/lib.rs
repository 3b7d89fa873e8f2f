//! Background-aware generalized few-shot semantic segmentation for LiDAR
//! range images.
//!
//! The crate covers the whole desk-scale pipeline: SemanticKITTI I/O and
//! spherical projection ([`geometry`]), class bookkeeping ([`taxonomy`]),
//! the segmentation and distillation losses with analytic gradients
//! ([`losses`]), a tiny per-pixel classifier ([`model`]), the base /
//! fine-tune protocol ([`protocol`]), IoU metrics ([`evaluation`]) and a
//! synthetic scene generator ([`synth`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod par;
pub mod protocol;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
