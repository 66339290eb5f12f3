//! Policy optimization for finite-horizon linear MDPs with bandit feedback.
//!
//! Layers, bottom up: [`covlinalg`] (regularized covariance bookkeeping),
//! [`mdpcore`] (model, generators, exact DP), [`estimation`] (ridge
//! estimators and error monitors), [`algorithms`] (the learners),
//! [`harness`] (configs, runs, CSV, CLI) and [`verify`] (numerical checks).

// Negated comparisons reject NaN on purpose; index loops mirror (h, x, a) tables.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod algorithms;
pub mod covlinalg;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod mdpcore;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
