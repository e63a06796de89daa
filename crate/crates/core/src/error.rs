use std::path::PathBuf;

use mico_autodiff::AutodiffError;
use thiserror::Error;

use crate::modality::ModalityTag;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] AutodiffError),

    #[error("{tag:?} payload shape {got:?} does not match layout {expected:?}")]
    PayloadShape {
        tag: ModalityTag,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{tag:?} extent {extent} is not divisible by patch size {patch}")]
    PatchSize {
        tag: ModalityTag,
        extent: usize,
        patch: usize,
    },
    #[error("caption of length {len} exceeds the limit {max}")]
    CaptionTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("{what} of length {len} exceeds table capacity {max}")]
    SequenceTooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("modality {0:?} appears more than once in one context")]
    DuplicateModality(ModalityTag),
    #[error("unknown dataset id {0}")]
    UnknownDataset(String),
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic at byte {offset}: expected {expected:?}")]
    BadMagic { offset: usize, expected: &'static str },
    #[error("unsupported format version {found} at byte {offset} (expected {expected})")]
    Version {
        offset: usize,
        found: u32,
        expected: u32,
    },
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed file at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },

    #[error("checkpoint parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config line {line}, key `{key}`: {reason}")]
    Config {
        line: usize,
        key: String,
        reason: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
