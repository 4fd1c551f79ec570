use std::path::PathBuf;

use mafnet::data::DataError;
use mafnet::losses::LossError;
use mafnet::metrics::MetricsError;
use mafnet::models::ModelError;
use mafnet::niftio::NiftiError;
use mafnet::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("output directory {0} exists and is not empty")]
    ExistsNonEmpty(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("history {0} has no step records")]
    EmptyHistory(PathBuf),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("figure output failed: {0}")]
    Figure(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 usage, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ExistsNonEmpty(_) | CliError::Config(_) => 2,
            CliError::Data(_) | CliError::EmptyHistory(_) | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Figure(_) => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NiftiError> for CliError {
    fn from(e: NiftiError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::BadWeights(m) => CliError::Config(m),
            LossError::Model(m) => m.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Loss(l) => l.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::BadConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
