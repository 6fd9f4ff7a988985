use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("PLY parse error at line {line}: {msg}")]
    PlyParse { line: usize, msg: String },

    #[error("no attributes: PLY vertex element lacks red/green/blue properties")]
    NoAttributes,

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("training diverged: non-finite loss at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("external codec binary `{binary}` not found: {msg}")]
    CodecMissing { binary: String, msg: String },

    #[error("external codec `{binary}` failed ({status}): {stderr}")]
    CodecFailed {
        binary: String,
        status: String,
        stderr: String,
    },

    #[error("corrupt image payload: {0}")]
    CorruptPayload(String),

    #[error("bitstream parse error: {0}")]
    Bitstream(String),

    #[error("geometry checksum mismatch on patch {patch}: header {expected:#018x}, geometry {actual:#018x}")]
    ChecksumMismatch {
        patch: usize,
        expected: u64,
        actual: u64,
    },

    #[error("determinism violation on patch {patch}: {msg}")]
    DeterminismViolation { patch: usize, msg: String },

    #[error("stage `{stage}` failed on patch {patch}: {source}")]
    Stage {
        stage: &'static str,
        patch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, patch: usize) -> Self {
        match self {
            // keep the innermost classification visible to callers
            e @ (Error::ChecksumMismatch { .. } | Error::DeterminismViolation { .. }) => e,
            e => Error::Stage {
                stage,
                patch,
                source: Box::new(e),
            },
        }
    }

    /// Strips `Stage` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
