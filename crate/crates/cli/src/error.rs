use thiserror::Error;

use hnu_core::corpus::CorpusError;
use hnu_core::hints::HintError;
use hnu_core::logic::{LogicError, ProblemError};
use hnu_core::network::NetworkError;
use hnu_core::predictor::PredictorError;
use hnu_core::session::SessionError;
use hnu_core::sim::SimError;
use hnu_core::stepscore::StepScoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Score(#[from] StepScoreError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Hint(#[from] HintError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::File { .. } | CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Problem(_) => "problem",
            CliError::Logic(_) => "logic",
            CliError::Corpus(_) => "corpus",
            CliError::Network(_) => "network",
            CliError::Score(_) => "stepscore",
            CliError::Predictor(_) => "predictor",
            CliError::Sim(_) => "simulation",
            CliError::Hint(_) => "hint",
            CliError::Session(_) => "session",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
