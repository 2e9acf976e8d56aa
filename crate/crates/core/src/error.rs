use std::io;

use crate::types::Tier;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("tier mismatch: expected {expected:?}, got {got:?}")]
    TierMismatch { expected: Tier, got: Tier },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("frame {frame_index} contains a non-finite value at offset {offset}")]
    NonFinite { frame_index: u64, offset: usize },

    #[error("out-of-sequence frame: expected index {expected}, got {got}")]
    Sequencing { expected: u64, got: u64 },

    #[error("frame {index} not found (bank holds {count} frames)")]
    NotFound { index: u64, count: u64 },

    #[error("feature bank integrity: {0}")]
    BankIntegrity(String),

    #[error("storage error: {0}")]
    Storage(#[from] io::Error),

    #[error("parse error at byte {offset} (record {record:?}): {message}")]
    Parse {
        offset: u64,
        record: Option<u64>,
        message: String,
    },

    #[error("lifecycle error: {0}")]
    Lifecycle(&'static str),

    #[error("invalid state: {0}")]
    InvalidState(String),
}

impl Error {
    pub(crate) fn parse(offset: u64, record: Option<u64>, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            record,
            message: message.into(),
        }
    }
}
