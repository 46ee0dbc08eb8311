//! Typical-set goodness-of-fit testing for generative models.
//!
//! A batch of inputs is in-distribution when its mean negative
//! log-likelihood under the model stays within a bootstrap-calibrated
//! distance of the model entropy. The crate provides the statistic and its
//! calibration ([`typicality`]), entropy estimators ([`entropy`]), analytic
//! and file-backed likelihood sources ([`models`]), comparison tests
//! ([`baselines`]), simulation campaigns ([`harness`]), and the command
//! line front end ([`cli`]).

pub mod baselines;
pub mod cli;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod models;
pub mod rng;
pub mod typicality;

pub use entropy::{EntropyEstimate, EntropyMethod};
pub use error::{Error, Result};
pub use models::Model;
pub use typicality::{Calibration, TestVerdict};
