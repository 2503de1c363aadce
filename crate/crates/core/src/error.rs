use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer {position} ({kind}): expected input {expected}, got {actual:?}")]
    LayerShape { position: usize, kind: String, expected: String, actual: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: f64, classes: usize },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("missing gradient for layer {position} {slot}")]
    MissingGrad { position: usize, slot: &'static str },

    #[error("zero-reference representation: clean tensor has zero norm but the perturbed one differs")]
    ZeroReference,

    #[error("incomplete CM record grid: {0}")]
    IncompleteGrid(String),

    #[error("IDX magic mismatch in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("IDX file {path} is truncated: {detail}")]
    IdxTruncated { path: PathBuf, detail: String },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("model is not two-dimensional: {0}")]
    NotTwoDimensional(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps `self` with the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage { stage: stage.into(), source: Box::new(self) }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config { .. } => 2,
            Error::Divergence { .. } => 3,
            Error::Checkpoint(_) | Error::ArchitectureMismatch(_) => 4,
            Error::NotTwoDimensional(_) => 5,
            _ => 1,
        }
    }
}
