use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: non-positive box")]
    NonPositiveBox { line: usize },

    #[error("bad magic: expected \"EMB1\"")]
    BadMagic,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("inseparable embedding: mean positive distance {mu_p} >= mean negative distance {mu_n}")]
    Inseparable { mu_p: f64, mu_n: f64 },

    #[error("instance has {n} nodes, exact solver limit is {limit}; use the heuristic solver")]
    ExactLimit { n: usize, limit: usize },

    #[error("forbidden pair ({0}, {1}) placed in one cluster")]
    ForbiddenPair(usize, usize),

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("detection {index} (camera {camera}, frame {frame}) has no embedding row")]
    MissingEmbedding { index: usize, camera: u32, frame: u64 },

    #[error("query {0} has no valid positive in the gallery")]
    NoPositive(usize),

    #[error("duplicate ground-truth box for identity {identity} at camera {camera}, frame {frame}")]
    DuplicateTruth { identity: u64, camera: u32, frame: u64 },

    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
