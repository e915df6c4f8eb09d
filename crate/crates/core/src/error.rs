use alloc::string::String;
use alloc::vec::Vec;

use crate::training::TraceRow;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("logarithm of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("reduction over an empty axis")]
    EmptyReduction,
    #[error("softmax slice has no valid entries")]
    AllMasked,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize, trace: Vec<TraceRow> },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
