//! Proxy-model explanations for language models.
//!
//! Explanations (LIME, Kernel SHAP) are fitted from a model's answers on
//! perturbed prompts. Fitting them on a cheap proxy model and evaluating them
//! on an expensive target is the point: [`eval`] measures how well that
//! transfers, [`compress`] uses example-level attributions to shorten
//! in-context prompts. Every query goes through the [`store`], so runs can be
//! replayed offline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod compress;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod explain;
pub mod export;
pub mod model;
pub mod store;
pub mod task;

pub use error::{Error, Result};
pub use proxex_core as core;
