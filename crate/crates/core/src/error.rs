use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Format,
    Config,
    Numerical,
    Infeasible,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("truncated header")]
    TruncatedHeader,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated data region: tensor {0:?} ends past the end of the file")]
    TruncatedData(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} not found")]
    MissingTensor(String),
    #[error("tensor {name:?} is not a matrix (shape {shape:?})")]
    NotAMatrix { name: String, shape: Vec<usize> },
    #[error("tensor {name:?}: unsupported dtype {dtype} for this use")]
    UnsupportedDtype { name: String, dtype: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("corrupt packed codes: {0}")]
    CorruptPackedCodes(String),
    #[error("invalid artifact: {0}")]
    InvalidArtifact(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gram not factorizable: {0}")]
    GramNotFactorizable(String),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    #[error("cannot normalize zero matrix {0:?}")]
    ZeroMatrix(String),
    #[error("dictionary initialization failed: {0}")]
    Initialization(String),
    #[error("V2 normalization undefined: loss {loss} of {name:?} is not greater than 1")]
    V2NormalizationUndefined { name: String, loss: f64 },
    #[error("value {value} of layer {layer:?} does not fit in f16")]
    F16Overflow { layer: String, value: f64 },

    #[error("budget too tight: no sparsity s >= 1 fits {m}x{n} at cr {target_cr}")]
    BudgetTooTight { m: usize, n: usize, target_cr: f64 },
    #[error("target CR unreachable under guards: {0}")]
    Unreachable(String),
    #[error("nothing compressed")]
    NothingCompressed,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Io(_) => ErrorKind::Io,
            TruncatedHeader
            | MalformedHeader(_)
            | TruncatedData(_)
            | DuplicateName(_)
            | MissingTensor(_)
            | NotAMatrix { .. }
            | UnsupportedDtype { .. }
            | NonFinite(_)
            | CorruptPackedCodes(_)
            | InvalidArtifact(_)
            | Json(_) => ErrorKind::Format,
            DimensionMismatch(_) | InvalidArgument(_) | NothingCompressed => ErrorKind::Config,
            GramNotFactorizable(_)
            | Decomposition(_)
            | ZeroMatrix(_)
            | Initialization(_)
            | V2NormalizationUndefined { .. }
            | F16Overflow { .. } => ErrorKind::Numerical,
            BudgetTooTight { .. } | Unreachable(_) => ErrorKind::Infeasible,
        }
    }
}
