use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] hff_core::Error),

    #[error(transparent)]
    Data(#[from] hff_data::DataError),

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch}; samples: {}", samples.join(", "))]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        samples: Vec<String>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl TrainError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TrainError::Invalid(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures reading or writing files.
    pub fn is_io(&self) -> bool {
        match self {
            TrainError::Core(e) => e.is_io(),
            TrainError::Data(e) => e.is_io(),
            TrainError::Io { .. } | TrainError::Json { .. } => true,
            TrainError::Invalid(_) | TrainError::NonFiniteLoss { .. } => false,
        }
    }

    /// Process exit code: 2 for I/O failures, 1 for contract violations.
    pub fn exit_code(&self) -> i32 {
        if self.is_io() {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;
