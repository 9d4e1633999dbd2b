//! Training-free guided diffusion sampling by inexact ADMM over analytic
//! priors, with convergence diagnostics and exact posterior oracles.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod guidance;
pub mod numeric;
pub mod plot;
pub mod prox;
pub mod sampler;
pub mod schedule;
pub mod scores;
pub mod tasks;

pub use error::{Error, Result};
