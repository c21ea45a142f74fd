use std::path::PathBuf;

/// Error type shared by every module in the crate.
///
/// `Format` covers malformed bytes or text (bad magic, unknown keys, garbled
/// manifest lines), `Length` covers payloads whose size disagrees with their
/// header, and `Invalid` covers violated preconditions on otherwise
/// well-formed data (shape mismatches, out-of-range parameters).
#[derive(Debug, thiserror::Error)]
pub enum RptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl RptError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RptError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, RptError>;
