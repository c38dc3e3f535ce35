//! Multi-task learning engine for joint slot filling and intent classification.
//!
//! Builds task, task-group, and task-universe encoders in parallel or serial
//! arrangements over a from-scratch reverse-mode differentiation core, with a
//! linear-chain CRF slot decoder, an intent classification head, adversarial
//! task discriminators behind a gradient reversal layer, and orthogonality
//! penalties between shared and task-specific feature spaces.

use std::fmt;

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod crf;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

/// Errors that reach the command line. Exit-code mapping:
/// config 2, numeric 3, compatibility 4, data 5.
#[derive(Debug)]
pub enum Error {
    /// Invalid or inconsistent run configuration.
    Config(String),
    /// Non-finite loss or gradient during training.
    Numeric(String),
    /// Checkpoint does not match the data it is applied to.
    Compat(String),
    /// Malformed or unexpected dataset content.
    Data(String),
    Io(std::io::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Compat(_) => 4,
            Error::Data(_) => 5,
            Error::Io(_) => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Compat(msg) => write!(f, "compatibility error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
