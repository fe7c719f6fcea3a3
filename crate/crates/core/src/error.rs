use std::path::PathBuf;

/// Errors produced by the promptseg library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimensionMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}{}: {msg}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Malformed {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scene placement failed for seed {seed}: {msg}")]
    Placement { seed: u64, msg: String },
    #[error("query: {0}")]
    Query(String),
    #[error("prompt schema violation: {0}")]
    Schema(String),
    #[error("policy: {0}")]
    Policy(String),
    #[error("reward: {0}")]
    Reward(String),
    #[error("segmenter bridge: {0}")]
    Bridge(String),
    #[error("evaluation: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(
        path: impl Into<PathBuf>,
        line: Option<usize>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
