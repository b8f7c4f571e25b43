use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification of failures, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("layer `{layer}`: expected shape {expected:?}, found {found:?}")]
    LayerShape {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("dataset format error at byte offset {offset}: {kind}: {message}")]
    Format {
        offset: u64,
        kind: FormatErrorKind,
        message: String,
    },

    #[error("line {line}: {kind}: {message}")]
    Csv {
        line: usize,
        kind: FormatErrorKind,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint digest mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Digest { stored: u32, computed: u32 },

    #[error("spec digest mismatch: checkpoint holds preset `{found}`, expected preset `{expected}`")]
    SpecDigest { expected: String, found: String },

    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    Truncated,
    LabelOutOfRange,
    Malformed,
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FormatErrorKind::BadMagic => "bad magic",
            FormatErrorKind::Truncated => "truncated payload",
            FormatErrorKind::LabelOutOfRange => "label out of range",
            FormatErrorKind::Malformed => "malformed",
        })
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape { .. }
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::LayerShape { .. }
            | Error::SpecDigest { .. } => ErrorClass::Config,
            Error::Data(_) | Error::Format { .. } | Error::Csv { .. } => ErrorClass::Data,
            Error::Domain { .. } | Error::NonFinite { .. } | Error::Tape(_) => ErrorClass::Numeric,
            Error::Checkpoint(_) | Error::Digest { .. } | Error::Io(_) => ErrorClass::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
