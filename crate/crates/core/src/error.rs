use std::io;

use thiserror::Error;

use crate::encoders::EncoderParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: String, found: String },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("record shape mismatch at line {line}: {msg}")]
    RecordShape { line: usize, msg: String },

    #[error("truncated payload: header declares {expected} records, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing latent class labels")]
    MissingLabels,

    #[error("missing ground-truth box for sample {0}")]
    MissingBox(usize),

    #[error("training diverged at stage {stage}, epoch {epoch}, step {step}")]
    Diverged {
        stage: u8,
        epoch: usize,
        step: usize,
        /// Parameters from the last step that produced a finite loss.
        last_finite: Box<EncoderParams>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
