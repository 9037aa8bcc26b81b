use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("io error: {0}")]
    RawIo(#[from] io::Error),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("vocabulary of {0} terms exceeds the 65536-term limit")]
    VocabularyTooLarge(usize),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("document has no tokens")]
    EmptyDocument,

    #[error("vocabulary size mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    #[error("vocabulary checksum mismatch: artifact built for {expected:016x}, got {actual:016x}")]
    ChecksumMismatch { expected: u64, actual: u64 },

    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),

    #[error("unknown document id {0:?}")]
    UnknownDocId(String),

    #[error("no stored vector for document {0:?}")]
    MissingRecord(String),

    #[error("ordinal {ordinal} out of range (store holds {count} documents)")]
    OrdinalOutOfRange { ordinal: u64, count: u64 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("non-finite gradient in parameter block {block} at index {index}")]
    NonFiniteGradient { block: &'static str, index: usize },

    #[error("no training triples")]
    NoTriples,

    #[error("validation set has no judged queries")]
    NoJudgedQueries,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
