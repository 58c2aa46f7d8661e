//! Numerical laboratory for entropy-regularized exploratory mean-variance
//! control with Lévy jumps.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod exploratory_sde;
pub mod harness_cli;
pub mod levy_model;
pub mod linalg;
pub mod optimal_control;
pub mod quadrature;
pub mod randomized_discrete;
pub mod rng;
pub mod stats;
pub mod weak_convergence_lab;

pub use error::{Error, Result};
