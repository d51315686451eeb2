//! Pure algorithmic core of `proxex`.
//!
//! Everything in this crate is deterministic and free of IO: feature
//! segmentation and coalition masks, the LIME and Kernel SHAP solvers, an exact
//! Shapley oracle, fidelity metrics (surrogate accuracy, MSE, AOPC), agreement
//! filtering, MDTA scoring for prompt compression and token pricing.
//!
//! The crate is `no_std` and only needs `alloc`.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod compression;
pub mod cost;
pub mod error;
pub mod fidelity;
pub mod hash;
pub mod linalg;
pub mod perturbation;
pub mod solvers;

pub use error::{Error, Result};
pub use perturbation::{FeatureSegmentation, Mask, SamplingStrategy, Segment, SegmentationMode};
pub use solvers::{Attribution, Method, RegressionSample};
