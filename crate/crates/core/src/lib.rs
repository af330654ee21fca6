//! Regression Monte Carlo for backward doubly stochastic differential equations, with a
//! finite-difference SPDE solver as an independent cross-check, discounted infinite-horizon
//! and pull-back constructions of stationary solutions, and Malliavin diagnostics.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod forward;
pub mod grid;
pub mod malliavin;
pub mod model;
pub mod noise;
pub mod bdsde;
pub mod regression;
pub mod spde;
pub mod stationary;
pub mod stats;
pub mod truncation;

pub use error::{Error, Result};
