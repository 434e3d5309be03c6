//! Targeted, consistency-regularized adversarial attacks on optical flow.

pub mod attack;
pub mod defense;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod flowio;
pub mod flowmodel;
pub mod metrics;
pub mod scenegen;
pub mod stats;
pub mod ttc;
pub mod types;

pub use error::{Error, Result};
