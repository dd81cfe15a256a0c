//! Bias-correlated dataset synthesis, targeted adversarial attacks, and
//! debiasing trainers with fairness diagnostics.
//!
//! The library is organized around a small set of moving parts:
//!
//! - [`corpus`] / [`dataset`] build grayscale digit corpora and colorize them
//!   into bias-correlated grouped datasets (the colored-digit protocol).
//! - [`nn`] / [`model`] provide a compact CNN with a shared feature extractor
//!   and separate target / bias / probe heads, with exact input gradients.
//! - [`attack`] generates targeted adversarial examples against the bias
//!   label, optionally preserving the target prediction.
//! - [`train`] implements the training procedures: plain supervised,
//!   down-sampling, reweighting, gradient-reversal debiasing, and the
//!   adversarial-augmentation family (pre / once / online / robust).
//! - [`metrics`] computes per-group accuracy, classification bias, and the
//!   cross-task transferability probe.
//! - [`experiment`] is the config-driven runner behind the CLI.

pub mod attack;
pub mod corpus;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod util;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attack error: {0}")]
    Attack(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("run directory error: {0}")]
    RunDir(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
