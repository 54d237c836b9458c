use std::io;

/// Errors surfaced by every subsystem of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("numeric fault: {0}")]
    NumericFault(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("degenerate output: {0}")]
    DegenerateOutput(String),
    #[error("invalid instruction: {0}")]
    InvalidInstruction(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("dataset is empty: no record passed both filters")]
    EmptyDataset,
    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("sampler diverged at step {step}")]
    Divergence { step: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
