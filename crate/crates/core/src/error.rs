use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = GallatError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GallatError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
}

impl GallatError {
    pub fn dimension(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        GallatError::Dimension { op, left, right }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        GallatError::Contract(msg.into())
    }
}
