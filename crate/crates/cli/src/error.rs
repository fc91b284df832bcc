use exms_core::datagen::DataError;
use exms_core::model::ModelError;
use exms_core::posttrain::PostTrainError;

/// Every failure surfaced by the command line. [`CliError::code`] is the
/// stable machine-readable prefix printed before the message.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    InfeasibleBalance(String),
    #[error("loss diverged at step {step}: {what}")]
    DivergedLoss { step: usize, what: String },
    #[error("{0}")]
    InvalidSamplingParams(String),
    #[error("{0}")]
    SlotCountMismatch(String),
    #[error("unknown check suite {0:?}")]
    UnknownSuite(String),
    #[error("{failed} of {total} checks failed")]
    CheckFailed { failed: usize, total: usize },
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Objective(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Io(_) => "IoError",
            CliError::Format(_) => "FormatError",
            CliError::InfeasibleBalance(_) => "InfeasibleBalance",
            CliError::DivergedLoss { .. } => "DivergedLoss",
            CliError::InvalidSamplingParams(_) => "InvalidSamplingParams",
            CliError::SlotCountMismatch(_) => "SlotCountMismatch",
            CliError::UnknownSuite(_) => "UnknownSuite",
            CliError::CheckFailed { .. } => "CheckFailed",
            CliError::Model(_) => "ModelError",
            CliError::Data(_) => "DataError",
            CliError::Objective(_) => "ObjectiveError",
        }
    }

    /// `ERROR <Code>: <message>` on one line.
    pub fn report(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("ERROR {}: {msg}", self.code())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(m) => CliError::Io(m),
            ModelError::Checkpoint(m) => CliError::Format(format!("checkpoint: {m}")),
            e @ ModelError::SlotCountMismatch { .. } => CliError::SlotCountMismatch(e.to_string()),
            ModelError::InvalidSamplingParams(m) => CliError::InvalidSamplingParams(m),
            ModelError::InvalidConfig(m) => CliError::Config(m),
            ModelError::PostTrain(e) => e.into(),
            e => CliError::Model(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            e @ DataError::InfeasibleBalance { .. } => CliError::InfeasibleBalance(e.to_string()),
            DataError::Io(m) => CliError::Io(m),
            DataError::Format(m) => CliError::Format(m),
            DataError::Model(e) => e.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<PostTrainError> for CliError {
    fn from(e: PostTrainError) -> Self {
        match e {
            PostTrainError::InvalidConfig(m) => CliError::Config(m),
            e => CliError::Objective(e.to_string()),
        }
    }
}

impl From<exms_core::numcore::NumError> for CliError {
    fn from(e: exms_core::numcore::NumError) -> Self {
        ModelError::from(e).into()
    }
}

impl From<exms_core::layers::LayerError> for CliError {
    fn from(e: exms_core::layers::LayerError) -> Self {
        ModelError::from(e).into()
    }
}
