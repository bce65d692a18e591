//! Desk-scale multi-modal tree cover segmentation with patch-level
//! uncertainty handling.
//!
//! The crate is organized around a small reverse-mode tensor core
//! ([`tensor`], [`tape`], [`ops`]) on top of which sit the pipeline
//! subsystems: patch grids ([`patch`]), uncertainty scoring and patch
//! reconstruction ([`surm`]), cross-modal distillation ([`cdm`]),
//! gradient-magnitude attention ([`gma`]), the refinement decoder
//! ([`decoder`]), losses and metrics ([`loss`], [`metrics`]), a synthetic
//! scene generator ([`synth`]), and the training/evaluation drivers
//! ([`model`], [`train`]).
//!
//! Batch work over independent samples runs data-parallel via rayon
//! (`parallel` feature, on by default) with a sequential fallback; all
//! randomness is counter-based so results do not depend on thread count.

pub mod cdm;
pub mod decoder;
pub mod error;
pub mod gma;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod mtf;
pub mod ops;
pub mod oracle;
pub mod parallel;
pub mod patch;
pub mod pgm;
pub mod rng;
pub mod surm;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
