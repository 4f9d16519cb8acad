//! Experiment runner around the `personafl` library: configuration,
//! the pretrain → fedtune → tune-rerank → evaluate pipeline, and generation.

pub mod config;
pub mod pipeline;

pub use config::{CorpusSource, ExperimentConfig, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] personafl::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown speaker {name:?}; known speakers: {}", known.join(", "))]
    UnknownSpeaker { name: String, known: Vec<String> },
}

impl CliError {
    /// 0 is success; 2 configuration or input, 3 schema or checkpoint,
    /// 4 unknown speaker, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use personafl::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::UnknownSpeaker { .. } => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::Input(_) | E::Io(_) | E::Json(_) | E::Vocab { .. } => 2,
                E::Schema(_) | E::Format(_) => 3,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
