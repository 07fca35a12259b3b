use std::path::PathBuf;

use fraudcot::cotrain::CotrainError;
use fraudcot::distill::DistillError;
use fraudcot::pipeline::PipelineError;
use fraudcot::synth::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {}: run `--stage {producer}` first", path.display())]
    Missing { path: PathBuf, producer: &'static str },
    #[error("stale artifact {}: it was produced under a different configuration; rerun `--stage {producer}`", path.display())]
    Stale { path: PathBuf, producer: &'static str },
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("output directory {} is locked by another run (remove {} if it is stale)", dir.display(), dir.join(".lock").display())]
    Locked { dir: PathBuf },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigLine { .. } | CliError::Config(_) => 2,
            CliError::Missing { .. } | CliError::Stale { .. } => 3,
            CliError::Numerical(_) => 4,
            _ => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<CotrainError> for CliError {
    fn from(e: CotrainError) -> Self {
        match e {
            CotrainError::NumericalAbort { .. } => CliError::Numerical(e.to_string()),
            CotrainError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Diverged { .. } => CliError::Numerical(e.to_string()),
            DistillError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Distill(d) => d.into(),
            PipelineError::Cotrain(c) => c.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => CliError::Config(m),
            SynthError::Cotrain(c) => c.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}
