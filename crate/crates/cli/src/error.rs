//! Error classification and exit codes.

use multictx::binfile::BinFileError;
use multictx::corpus::CorpusError;
use multictx::corpusgen::CorpusGenError;
use multictx::embed::EmbedError;
use multictx::group::GroupError;
use multictx::llm::LlmError;
use multictx::metrics::MetricsError;
use multictx::store::StoreError;
use multictx::synth::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments.
    #[error("configuration error: {0}")]
    Config(String),
    /// An external service (LLM, embedding, image backend) failed.
    #[error("provider error: {0}")]
    Provider(String),
    /// Input or output data problems.
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Provider(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            _ if e.is_provider_failure() => CliError::Provider(e.to_string()),
            LlmError::Policy(_) | LlmError::Fixture { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Provider { .. } => CliError::Provider(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Llm(e) => e.into(),
            SynthError::Embed(e) => e.into(),
            SynthError::Backend(_) => CliError::Provider(e.to_string()),
            SynthError::MissingPrerequisite { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CorpusGenError> for CliError {
    fn from(e: CorpusGenError) -> Self {
        match e {
            CorpusGenError::Llm(e) => e.into(),
            CorpusGenError::NoSources => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    CorpusError,
    GroupError,
    StoreError,
    MetricsError,
    BinFileError,
    std::io::Error
);
