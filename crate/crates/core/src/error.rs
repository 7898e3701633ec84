use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {available_hours:.6} h eligible, {requested_hours:.6} h requested (short by {:.6} h)", requested_hours - available_hours)]
    InsufficientData {
        available_hours: f64,
        requested_hours: f64,
    },

    #[error("utterance {0} is unlabeled")]
    Unlabeled(String),

    #[error("duplicate utterance id {0}")]
    DuplicateId(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("sequence too short: {frames} frames, downsampling factor {k}")]
    SequenceTooShort { frames: usize, k: usize },

    #[error("prompt template {0:?} has no [LANGUAGE] slot")]
    MissingSlot(String),

    #[error("symbol {symbol} outside vocabulary of size {vocab}")]
    UnknownSymbol { symbol: usize, vocab: usize },

    #[error("non-finite loss at step {step} (batch: {})", batch_ids.join(", "))]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("checkpoint does not match active backends\n  checkpoint: {checkpoint}\n  backends:   {active}")]
    CheckpointMismatch { checkpoint: String, active: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage labels peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), Error::NonFiniteLoss { .. })
    }
}
