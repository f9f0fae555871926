use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed array file: {0}")]
    Format(String),

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("invalid matrix shape: {0}")]
    Shape(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("zero-norm row {0} cannot be normalized")]
    ZeroNormRow(usize),

    #[error("label length mismatch: {labels} labels for {rows} rows")]
    LabelLengthMismatch { labels: usize, rows: usize },

    #[error("name length mismatch: {names} names for {rows} rows")]
    NameLengthMismatch { names: usize, rows: usize },

    #[error("label {value} at index {index} is not 0 or 1")]
    InvalidLabel { index: usize, value: i64 },

    #[error("invalid prompts: {0}")]
    Prompt(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{0}")]
    InvalidComponents(String),

    #[error("identical prompts: all difference vectors are zero")]
    IdenticalPrompts,

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("basis not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),

    #[error("subspace metadata: {0}")]
    Metadata(String),

    #[error("transform has no steps")]
    EmptyTransform,

    #[error("k exceeds reference size ({k} > {rows})")]
    KTooLarge { k: usize, rows: usize },

    #[error("k must be at least 1")]
    KZero,

    #[error("metrics need both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },

    #[error("score at index {0} is NaN")]
    NanScore(usize),

    #[error("length mismatch: {scores} scores, {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },

    #[error("invalid tpr target {0}")]
    TprTarget(f64),

    #[error("synthetic spec: {0}")]
    Synth(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Decomposition(_) => 3,
            _ => 2,
        }
    }
}
