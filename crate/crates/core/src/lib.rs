//! Texture-adaptive deep material networks for polycrystal homogenization.
//!
//! The crate covers the whole offline/online workflow: synthetic periodic
//! polycrystals ([`rvegen`]), FFT labels ([`oracle`]), orientation reduction
//! ([`tacs`]), grain graphs ([`mgraph`]), the graph network ([`gnn`]), the
//! binary-tree material network ([`odmn`]) and crystal-plasticity online
//! prediction ([`cponline`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod block;
mod codec;
pub mod cponline;
pub mod dataset;
pub mod error;
pub mod gnn;
pub mod metrics;
pub mod mgraph;
pub mod odmn;
pub mod optim;
pub mod oracle;
pub mod reference;
pub mod rotlab;
pub mod rvegen;
pub mod tacs;

pub use error::{Error, Result};
