// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A buffer or tensor did not have the length its declared shape implies.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// NaN or infinity where finite values are required.
    NonFinite(&'static str),
    /// An argument violated a documented precondition.
    InvalidArgument(String),
    /// An operation needed at least one item and got none.
    Empty(&'static str),
    /// A lookup (concept id, label, token) had nothing to resolve to.
    NotFound(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected {expected}, found {found}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Empty(what) => write!(f, "empty {what}"),
            Error::NotFound(what) => write!(f, "not found: {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
