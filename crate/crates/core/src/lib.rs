//! Desk-scale simulator of federated domain generalisation with client-side
//! gradient-alignment masks and variance-minimising server aggregation.
//!
//! * [`engine`]: masked MLP with exact gradients and mask Hessian-vector products
//! * [`envgen`]: synthetic environments with invariant and spurious feature blocks
//! * [`client`]: local training, alignment penalty, round uploads
//! * [`server`]: FedAvg weights, global mask gradient, risk-equalising coefficients
//! * [`harness`]: round loop, baselines, metrics, seed sweeps, reports

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod engine;
pub mod envgen;
pub mod error;
pub mod harness;
mod seed;
pub mod server;

pub use error::{Error, Result};
pub use seed::derive_seed;
