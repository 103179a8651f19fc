//! Error types shared across the toolkit.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by dataset construction, training and evaluation.
#[derive(Debug)]
pub enum Error {
    /// A configuration value violates a precondition (bad label sets,
    /// image too small, inconsistent iteration counts, ...).
    InvalidConfig(String),
    /// An input value violates a runtime contract (shape mismatch,
    /// probabilities outside [0, 1], ...).
    InvalidInput(String),
    /// Building the composite negative dataset failed; the message names
    /// the offending class.
    DatasetConstruction(String),
    /// Class prior estimation failed; the message names the class.
    PriorEstimation(String),
    /// A training loss became non-finite at the given step.
    TrainingDiverged { step: usize, loss: String },
    /// A problem with corpus data on disk (missing files, undeclared
    /// labels, undecodable images).
    Data(String),
    /// A malformed or inconsistent checkpoint.
    Checkpoint(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::DatasetConstruction(msg) => write!(f, "dataset construction failed: {msg}"),
            Error::PriorEstimation(msg) => write!(f, "prior estimation failed: {msg}"),
            Error::TrainingDiverged { step, loss } => {
                write!(f, "training diverged at step {step}: {loss} is non-finite")
            }
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
