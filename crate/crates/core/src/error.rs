use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("invalid byte 0x{byte:02x} at position {position}")]
    Encoding { position: usize, byte: u8 },
    #[error("cannot decode token id {id} at position {position}")]
    Decoding { position: usize, id: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("model mismatch: {0}")]
    Mismatch(String),
    #[error("calibration target of {target} safe errors unreachable; best achieved {achieved} at factor {factor}")]
    Unreachable {
        target: usize,
        achieved: usize,
        factor: f64,
    },
    #[error("missing oracle estimate for password index {0}")]
    MissingOracle(usize),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
