use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A character that the vocabulary cannot encode.
    #[error("cannot encode {ch:?} at position {pos}")]
    Encoding { ch: char, pos: usize },

    /// Caller broke an operation precondition (shape mismatch, id out of range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// No CTC alignment can produce the target.
    #[error("target of length {target_len} (with {repeats} adjacent repeats) does not fit in {frames} frames")]
    Infeasible {
        target_len: usize,
        repeats: usize,
        frames: usize,
    },

    /// Exhaustive enumeration refused because the search space is too big.
    #[error("instance too large for exhaustive evaluation: {0}")]
    TooLarge(String),

    /// A token the language model has no entry for.
    #[error("language model cannot score token {0:?}")]
    Scoring(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Unusable input data (empty image, mismatched lists, undefined metric).
    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}
