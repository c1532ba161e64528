use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor_store::Digest;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("tensor `{tensor}` has a non-finite element at index {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("tensor names must be non-empty")]
    EmptyName,

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor `{tensor}`: shape {shape:?} needs {expected} elements, found {found}")]
    LengthMismatch {
        tensor: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("tensor `{tensor}`: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("key-set mismatch: {0}")]
    KeyMismatch(String),

    #[error("tensor `{tensor}` has a negative second moment at index {index}")]
    NegativeMoment { tensor: String, index: usize },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported compressor id {0}")]
    UnsupportedCompressor(u8),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("checksum mismatch")]
    ChecksumMismatch,

    #[error("malformed data: {0}")]
    Format(String),

    #[error("code {code} does not fit in {bits} bits")]
    CodeOverflow { code: u8, bits: u8 },

    #[error("tensor `{tensor}`: code {code} out of range for a codebook of {codebook_len}")]
    CodeOutOfRange {
        tensor: String,
        code: u8,
        codebook_len: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot fit a codebook to an empty input")]
    EmptyInput,

    #[error("base mismatch: archive expects {expected}, previous weights hash to {found}")]
    BaseMismatch { expected: Digest, found: Digest },

    #[error("chain digest mismatch at entry {index} (step {step})")]
    ChainDigestMismatch { index: usize, step: u64 },

    #[error("chain entry {index} (step {step}): {source}")]
    ChainEntry {
        index: usize,
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("steps must strictly increase along a chain: {found} follows {prev}")]
    NonIncreasingStep { prev: u64, found: u64 },

    #[error("step {0} is not in the chain")]
    MissingStep(u64),

    #[error("compressor failure: {0}")]
    Compressor(String),

    #[error("manifest {0} is locked by another process")]
    Locked(PathBuf),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error once any stage tags are peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::ChainEntry { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
