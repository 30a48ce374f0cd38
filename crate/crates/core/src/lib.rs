//! Feature pyramid networks at desk scale.
//!
//! The crate covers the whole pipeline on synthetic data: a small autodiff
//! tensor library, a residual backbone, pyramid construction and its
//! ablation variants, region proposals, a RoI detector, dense segment
//! proposals, COCO-style metrics, and the training and evaluation harness.
pub mod ablation;
pub mod backbone;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fpn;
pub mod geometry;
pub mod gradsuite;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod rpn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
