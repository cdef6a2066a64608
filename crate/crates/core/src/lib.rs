//! Reward-weighted fine-tuning objectives on desk-scale policies.
//!
//! * [`corpus`]: demonstration records, tokenization and the positive set D⁺.
//! * [`policy`]: tabular and tiny neural autoregressive policies with exact
//!   log-probabilities, analytic gradients and response enumeration.
//! * [`objectives`]: SFT, DFT and ASFT losses with stop-gradient weights and
//!   KL anchoring.
//! * [`bounds`]: the RL objective and its SFT/DFT lower bounds in closed
//!   form, the covariance identity between them, and drift diagnostics.
//! * [`trainer`]: seeded fine-tuning loops and drift experiments.
//! * [`gradcheck`]: finite-difference suites for the loss gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod objectives;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
