//! Volumetric lesion segmentation with a site-confusion regularization head.
//!
//! The crate bundles everything needed for desk-scale experiments: a small
//! reverse-mode autodiff engine with 3D primitives, a U-Net style
//! encoder/decoder with an auxiliary domain classifier, the segmentation
//! and regularization losses, a synthetic multi-site phantom generator, the
//! patch pipeline, lesion-wise metrics and the cross-validation harness.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod patchflow;
pub mod rng;
pub mod synthdata;
pub mod volume;

pub use autodiff::{Graph, Real, Tensor, Var};
pub use error::{Error, Result};
