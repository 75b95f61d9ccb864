//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by corpus handling, numerics, modeling, training and
/// the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line count mismatch: {left} has {left_lines} lines, {right} has {right_lines}")]
    LineCountMismatch {
        left: PathBuf,
        left_lines: usize,
        right: PathBuf,
        right_lines: usize,
    },

    #[error("line {line}: gold segmentation does not match source after whitespace removal (source {source_text:?}, gold joins to {gold:?})")]
    GoldMismatch {
        line: usize,
        source_text: String,
        gold: String,
    },

    #[error("{path} line {line}: empty line")]
    EmptyLine { path: PathBuf, line: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("cannot split {total} pairs with dev fraction {fraction}: both sides must be non-empty")]
    SplitTooSmall { total: usize, fraction: f64 },

    #[error("invalid dev fraction {0}: must lie strictly between 0 and 1")]
    InvalidFraction(f64),

    #[error("supervision requires gold segmentation on every pair")]
    MissingGold,

    #[error("cannot inject {k} word types: {available} gold types available")]
    SupervisionK { k: usize, available: usize },

    #[error("supervision count must be at least 1")]
    SupervisionZero,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("softmax temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parameter {0} has no populated gradient")]
    MissingGradient(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidId { id: u32, vocab: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("attention mask excludes every position")]
    AllMasked,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence {
        epoch: usize,
        trace: Vec<(usize, f64)>,
    },

    #[error("infeasible generator spec: {requested} lexicon entries requested but only {available} strings exist")]
    InfeasibleSpec { requested: usize, available: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("segmentation/gold symbol sequences differ at sentence {sentence}")]
    SymbolSequenceMismatch { sentence: usize },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error reflects invalid input/configuration rather than a
    /// runtime failure. The CLI maps validation errors to exit status 1 and
    /// everything else to 2.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::LineCountMismatch { .. }
            | Error::GoldMismatch { .. }
            | Error::EmptyLine { .. }
            | Error::EmptyCorpus
            | Error::SplitTooSmall { .. }
            | Error::InvalidFraction(_)
            | Error::MissingGold
            | Error::SupervisionK { .. }
            | Error::SupervisionZero
            | Error::NonPositiveTemperature(_)
            | Error::InfeasibleSpec { .. }
            | Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
