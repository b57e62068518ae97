use infogan_dp::data::DataError;
use infogan_dp::dist::DistError;
use infogan_dp::dp::DpError;
use infogan_dp::models::ModelError;
use infogan_dp::params::ParamError;
use infogan_dp::trainer::{ChannelError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("{0}")]
    Runtime(String),
    #[error("protocol failure: {0}")]
    Protocol(String),
}

impl CliError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 1,
            CliError::Runtime(_) => 2,
            CliError::Protocol(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::invalid("model", m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        CliError::Runtime(format!("checkpoint: {e}"))
    }
}

impl From<DpError> for CliError {
    fn from(e: DpError) -> Self {
        match e {
            DpError::Domain { name, .. } => {
                let field = match name {
                    "batch_size" => "train.batch_size".to_string(),
                    other => format!("privacy.{other}"),
                };
                CliError::invalid(field, e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::invalid("train", m),
            TrainError::Channel(ChannelError::Protocol(m)) => CliError::Protocol(m),
            TrainError::Dp(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DistError> for CliError {
    fn from(e: DistError) -> Self {
        match e {
            DistError::Client {
                source: TrainError::Channel(ChannelError::Protocol(_)),
                ..
            }
            | DistError::Protocol(_)
            | DistError::Transport(_) => CliError::Protocol(e.to_string()),
            DistError::Config(m) => CliError::invalid("model", m),
            DistError::Client { .. } => CliError::Runtime(e.to_string()),
        }
    }
}
