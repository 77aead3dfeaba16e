use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, grids or lengths that do not fit together.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid solver or experiment parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A solver produced a non-finite value.
    #[error("{solver} diverged at iteration {iteration}")]
    Divergence {
        solver: &'static str,
        iteration: usize,
    },

    /// Error raised inside an outer iteration of the joint solve.
    #[error("outer iteration {outer}: {source}")]
    Outer {
        outer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("missing frame index {index} in {dir}")]
    FrameGap { dir: PathBuf, index: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Experiment {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Wrap with experiment context.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Experiment {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable category for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::Outer { source, .. } | Error::Experiment { source, .. } => source.kind(),
            Error::Format { .. } => "format",
            Error::FrameGap { .. } => "frame_gap",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }
}
