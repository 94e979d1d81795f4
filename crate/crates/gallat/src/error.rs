use std::fmt;
use std::path::Path;

use gallat_core::GallatError;

/// Failure classes, each with its own process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Other,
    Usage,
    Io,
    InsufficientHistory,
    Format,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Other => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::InsufficientHistory => 4,
            ErrorKind::Format => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Other => "other",
            ErrorKind::Usage => "usage",
            ErrorKind::Io => "io",
            ErrorKind::InsufficientHistory => "insufficient-history",
            ErrorKind::Format => "format",
        }
    }
}

#[derive(Debug)]
pub struct Error {
    pub kind: ErrorKind,
    pub message: String,
}

impl Error {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Format, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {err}", path.display()))
    }
}

/// One line: `error kind=<kind> message=<json string>`.
impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = serde_json::Value::String(self.message.clone());
        write!(f, "error kind={} message={msg}", self.kind.name())
    }
}

impl std::error::Error for Error {}

impl From<GallatError> for Error {
    fn from(e: GallatError) -> Self {
        let kind = match e {
            GallatError::InsufficientHistory(_) => ErrorKind::InsufficientHistory,
            _ => ErrorKind::Other,
        };
        Self::new(kind, e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
