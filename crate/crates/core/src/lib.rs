//! Preference flow matching: learn a vector field that moves less-preferred
//! samples toward preferred ones, plus exact discrete oracles, reward-model
//! and DPO baselines, and evaluation metrics.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod flowmatch;
pub mod nnflow;
pub mod oracle;
pub mod prefdata;
pub mod rng;

pub use error::{Error, Result};
