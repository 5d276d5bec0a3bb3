//! Forward-KL, reward-aware policy optimization on enumerable discrete
//! sequence spaces.
//!
//! Every distribution in this crate is an explicit probability vector over a
//! fully enumerated outcome space, so objectives, gradients and divergences
//! are computed exactly and serve as oracles for the sampled training loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod optima;
pub mod policy;
pub mod reweight;
pub mod seqspace;
pub mod trainer;

pub use error::{Error, Result};
