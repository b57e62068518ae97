//! Gaussian-mechanism privacy for discriminator updates.
//!
//! [`mechanism`] holds the noise calibration and the clip/average/noise
//! pipeline; [`accountant`] tracks the Rényi budget actually spent.

pub mod accountant;
pub mod mechanism;
pub mod report;

pub use accountant::{ledger_epsilon, rdp_of_gaussian, AccountantLedger, LedgerEntry, DEFAULT_ORDERS};
pub use mechanism::{clip_gradient, noise_scale, privatize_gradients, PrivacyParams, Privatized};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error("{name} = {value} is outside its domain ({domain})")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("gradient contains a non-finite value")]
    NonFinite,
    #[error("no per-example gradients supplied")]
    Empty,
    #[error("per-example gradient {index} has length {actual}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("privacy ledger is empty")]
    EmptyLedger,
    #[error("ledger parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },
}
