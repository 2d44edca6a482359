use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("word `{0}` is not in the lexicon")]
    OutOfVocabulary(String),

    #[error("lexicon error: {0}")]
    Lexicon(String),

    #[error("phone set error: {0}")]
    PhoneSet(String),

    #[error("infeasible utterance: {frames} frames but the shortest accepting path needs {min_frames}")]
    Infeasible { frames: usize, min_frames: usize },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: truncated or malformed binary data at byte offset {offset}: {msg}")]
    Binary {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("utterance `{utt}`: {msg}")]
    Utterance { utt: String, msg: String },

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

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for errors that invalidate a single utterance rather than the run.
    pub fn is_utterance_level(&self) -> bool {
        matches!(
            self,
            Error::Infeasible { .. } | Error::OutOfVocabulary(_) | Error::Utterance { .. }
        )
    }
}
