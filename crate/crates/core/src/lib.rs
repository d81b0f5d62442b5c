//! Learnable channel selection for multi-channel signals.
//!
//! A concrete (Gumbel-softmax) selector layer is trained jointly with a
//! downstream network, with an optional penalty that discourages several
//! selection neurons from settling on the same input channel. Two
//! task-specific baselines (mutual-information forward selection and
//! least-squares utility elimination) and synthetic datasets with known
//! informative channels are provided for comparison.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod par;
pub mod rng;
pub mod selector;

pub use error::{Error, Result};
