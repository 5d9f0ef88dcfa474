use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("path not found: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Context { context: String, message: String, kind: ErrorKind },
}

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Internal,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPath(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::CorruptCheckpoint(_)
            | Error::Format(_)
            | Error::MissingPath(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::Shape(_) | Error::Contract(_) => ErrorKind::Internal,
            Error::Context { kind, .. } => *kind,
        }
    }

    /// Wraps the error with a location description, keeping its kind.
    pub fn context(self, context: impl Into<String>) -> Self {
        let kind = self.kind();
        Error::Context {
            context: context.into(),
            message: self.to_string(),
            kind,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for data or
    /// checkpoint problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Internal => 1,
        }
    }
}
