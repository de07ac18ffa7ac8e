//! Error taxonomy shared across the crate.
//!
//! Errors split into a validation class (bad parameters, bad configuration,
//! missing capabilities, misaligned input sets) and a runtime class
//! (model/numerical/codec/IO failures). The CLI maps the classes to exit
//! codes 1 and 2 respectively.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VeilError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("input sets misaligned: missing {missing:?}, unmatched {unmatched:?}")]
    Alignment {
        missing: Vec<String>,
        unmatched: Vec<String>,
    },

    #[error("model evaluation failed: {0}")]
    Model(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("query budget exceeded: {0}")]
    Budget(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VeilError>;

impl VeilError {
    /// Exit code class for the CLI: 1 = validation, 2 = runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            VeilError::Parameter(_)
            | VeilError::Config(_)
            | VeilError::Capability(_)
            | VeilError::Alignment { .. } => 1,
            _ => 2,
        }
    }

    /// Prefix the message with where the failure happened; the variant
    /// (and therefore the exit code) is preserved.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        let ctx = ctx.as_ref();
        match self {
            VeilError::Parameter(m) => VeilError::Parameter(format!("{ctx}: {m}")),
            VeilError::Config(m) => VeilError::Config(format!("{ctx}: {m}")),
            VeilError::Capability(m) => VeilError::Capability(format!("{ctx}: {m}")),
            VeilError::Model(m) => VeilError::Model(format!("{ctx}: {m}")),
            VeilError::Numerical(m) => VeilError::Numerical(format!("{ctx}: {m}")),
            VeilError::Format(m) => VeilError::Format(format!("{ctx}: {m}")),
            VeilError::Codec(m) => VeilError::Codec(format!("{ctx}: {m}")),
            VeilError::Budget(m) => VeilError::Budget(format!("{ctx}: {m}")),
            VeilError::Io(e) => {
                VeilError::Io(std::io::Error::new(e.kind(), format!("{ctx}: {e}")))
            }
            other => other,
        }
    }
}
