use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic bytes in feature file")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    BadVersion(u8),
    #[error("feature file truncated: expected {expected} bytes of payload, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("manifest schema error: {0}")]
    SchemaError(String),
    #[error("class {class} appears in more than one group")]
    GroupOverlap { class: usize },
    #[error("unknown class index {index} (K = {k})")]
    UnknownClassIndex { index: usize, k: usize },
    #[error("class {class} has {found} prototypes, need at least 2")]
    TooFewPrototypes { class: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("item {item} has zero posterior mass for every class")]
    ZeroPosterior { item: usize },
    #[error("annotation log is empty")]
    EmptyLog,
    #[error("invalid EM parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("skill bank has no workers")]
    EmptyBank,
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("invalid groups: {0}")]
    InvalidGroups(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum AssignError {
    #[error("no eligible worker for item {item}")]
    NoEligibleWorker { item: usize },
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ground truth missing for item {0}")]
    MissingTruth(usize),
    #[error("finished set is empty")]
    EmptyFinishedSet,
    #[error("no metric rows to emit")]
    NoRows,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
#[error("config error at `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Top-level error for the end-to-end pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
