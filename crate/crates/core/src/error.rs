use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("entity pool exhausted: {0}")]
    PoolExhausted(String),
    #[error("unknown fact id {0}")]
    UnknownFact(u64),
    #[error("relation `{relation}` has no alternative object to contradict `{object}`")]
    NoAlternativeObject { relation: String, object: String },
    #[error("relation `{relation}` has {available} templates, {needed} needed")]
    TemplateShortage {
        relation: String,
        available: usize,
        needed: usize,
    },
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownTokenId(u32),
    #[error("cannot split {n} ids into {k} folds")]
    TooFewIds { n: usize, k: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("strategy {0} needs a gradient snapshot")]
    MissingSnapshot(&'static str),
    #[error("strategy {0} needs a donor profile")]
    MissingDonor(&'static str),
    #[error("selection of {requested} neurons exceeds the {total} available")]
    SelectionTooLarge { requested: usize, total: usize },
    #[error("neuron {0} does not exist in this model")]
    InvalidNeuron(String),
    #[error("historical normalization requested without a profile")]
    MissingProfile,
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("fold plan does not cover sample {0}")]
    FoldCoverage(u64),
    #[error("feature importance is only defined for random forests")]
    WrongClassifierKind,
    #[error("only {found} known facts available, {needed} needed")]
    InsufficientKnownFacts { found: usize, needed: usize },
    #[error("no remembered facts to measure retention on")]
    EmptyRememberedSet,
    #[error("training did not converge: accuracy {accuracy:.4} after {epochs} epochs")]
    NonConvergence { accuracy: f64, epochs: usize },
    #[error("stage gating: {0}")]
    StageGate(String),
    #[error("corrupt or unsupported file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
