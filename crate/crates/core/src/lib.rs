//! Uplink cell-free massive MIMO with multi-antenna users.
//!
//! The crate synthesizes jointly-correlated (Weichselberger) channels,
//! estimates them under pilot contamination, evaluates spectral efficiency
//! for fully-centralized processing (FCP) and large-scale fading decoding
//! (LSFD), and maximizes the weighted sum SE with iteratively weighted MMSE
//! precoding.
//!
//! Module map:
//! - [`model`]: network geometry, correlation synthesis, channel sampling.
//! - [`pilots`]: pilot books, assignment, MMSE channel estimation.
//! - [`fcp`]: centralized combining, MSE matrices and SE.
//! - [`lsfd`]: local combining, statistical moments, LSFD weights and SE.
//! - [`closedform`]: analytical moments for MR combining.
//! - [`wmmse`]: the two precoding algorithms and the multiplier search.
//! - [`harness`]: experiment specs, sweeps, reports, fronthaul and complexity accounting.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod closedform;
pub mod error;
pub mod fcp;
pub mod harness;
pub mod linalg;
pub mod lsfd;
pub mod model;
pub mod pilots;
pub mod rng;
pub mod wmmse;

pub use error::{Error, Result};
pub use fcp::PrecoderSet;
pub use linalg::{CMat, C64};
pub use model::{CorrelationSet, NetworkConfig, NetworkLayout};
pub use pilots::{EstimationStats, PilotBook};
