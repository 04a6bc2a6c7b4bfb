use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("no classes found under {0}")]
    NoClasses(PathBuf),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("image too small: {width}x{height} supports at most {max_octaves} octave(s)")]
    ImageTooSmall {
        width: usize,
        height: usize,
        max_octaves: usize,
    },

    #[error("insufficient descriptors: {have} available, {need} required")]
    InsufficientDescriptors { have: usize, need: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("descriptor kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: crate::descriptor::DescriptorKind,
        found: crate::descriptor::DescriptorKind,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the command line for machine-parseable errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Decode { .. } => "decode",
            Error::NoClasses(_) => "dataset",
            Error::Parameter(_) => "parameter",
            Error::ImageTooSmall { .. } => "image-too-small",
            Error::InsufficientDescriptors { .. } => "insufficient-descriptors",
            Error::DimensionMismatch { .. } | Error::KindMismatch { .. } => "mismatch",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
        }
    }
}
