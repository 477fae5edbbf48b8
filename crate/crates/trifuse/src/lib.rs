//! Trimodal low-rank fusion transformers on a minimal f64 autodiff core.
//!
//! The crate provides:
//! - a dense-tensor tape engine with the layers the architectures need
//!   ([`tensor`]),
//! - the low-rank fusion kernel and its explicit full-tensor oracle
//!   ([`fusion`]),
//! - single-head cross-modal and self-attention blocks ([`attention`]),
//! - three assembled architectures with a named parameter registry
//!   ([`model`]),
//! - synthetic trimodal datasets and a JSON-lines on-disk format ([`data`]),
//! - training, evaluation metrics, and epoch-time benchmarking ([`train`],
//!   [`metrics`]),
//! - finite-difference gradient verification ([`gradcheck`]).

pub mod attention;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{NodeId, Padding, Tape, Tensor};
