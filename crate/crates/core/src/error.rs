use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("container parse error in field `{field}`: {reason}")]
    Parse { field: &'static str, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value in {context} at iteration {iteration} (max |value| = {max_abs})")]
    NonFinite {
        context: &'static str,
        iteration: usize,
        max_abs: f64,
    },

    #[error("refiner architecture mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },

    #[error("cache at {path} is stale ({reason}); rebuild required")]
    RebuildRequired { path: PathBuf, reason: String },

    #[error("ground-truth access denied for scene `{scene}` in {mode} mode")]
    GroundTruthDenied { scene: String, mode: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parse {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter { .. } => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
