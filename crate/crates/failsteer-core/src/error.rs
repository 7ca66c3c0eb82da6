//! Error type shared across the core crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type CoreResult<T> = Result<T, CoreError>;

/// Errors produced by the algorithmic core.
#[derive(Clone, Debug, PartialEq)]
pub enum CoreError {
    /// Operand shapes do not conform; carries both shapes and the operation name.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation produced a non-finite value from finite inputs.
    Numeric { op: &'static str },
    /// A precondition of an operation was violated.
    Contract(String),
    /// Incompatible configuration detected at construction time.
    Config(String),
    /// No collision-free path exists for the planner.
    Plan,
    /// A failed trajectory has no recoverable prefix to correct from.
    NoCorrection,
    /// Dataset assembly failed; names the offending split.
    Data(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { op, left, right } => {
                write!(f, "shape mismatch in {op}: {left:?} vs {right:?}")
            }
            CoreError::Numeric { op } => write!(f, "non-finite value produced by {op}"),
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::Plan => write!(f, "no collision-free path"),
            CoreError::NoCorrection => write!(f, "no recoverable prefix in failed trajectory"),
            CoreError::Data(msg) => write!(f, "dataset error: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}
