//! Personalized federated fine-tuning of a frozen toy dual encoder with
//! multi-modal adapters.
//!
//! Clients train every adapter matrix locally; only the cross-modal shared
//! projections travel to the server, which averages them uniformly.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod backbone;
pub mod container;
pub mod datagen;
pub mod error;
pub mod evalrun;
pub mod federation;
pub mod rng;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
