//! Desk-scale training of a noise-robust composed image retrieval model.
//!
//! The crate covers counterfactual image generation in the frequency domain,
//! a synthetic triplet corpus with injectable correspondence noise, a small
//! differentiable attention composer, the robust training objectives and
//! the evaluation/experiment plumbing around them.

pub mod composer;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod image;
pub mod intervention;
pub mod objectives;
pub mod train;

pub use error::{IntentError, Result};
pub use image::Image;
