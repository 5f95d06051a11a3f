use thiserror::Error;

/// Errors produced across the guidance pipeline.
///
/// The variants line up with the CLI exit codes: `Input` is a usage problem,
/// `Config` a misconfigured adapter or option, everything else a runtime
/// failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite gradient at step {step} (t={timestep}); loss breakdown: {breakdown}")]
    NonFiniteGradient {
        step: usize,
        timestep: usize,
        breakdown: String,
    },

    #[error("adapter failure: {0}")]
    Adapter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
