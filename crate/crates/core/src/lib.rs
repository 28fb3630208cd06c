//! Partial-diffusion Kalman filtering over sensor networks.
//!
//! Nodes run a local Kalman update on their own observation and then blend
//! a subset of their neighbors' intermediate estimates. The crate provides
//! the filters, a diffusion KF baseline, the steady-state mean-square
//! deviation theory, and a Monte-Carlo harness that checks one against the
//! other.

pub mod analysis;
pub mod error;
pub mod filters;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod selection;
pub mod statespace;

pub use error::{Error, Result};
