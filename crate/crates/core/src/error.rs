use thiserror::Error;

/// Errors raised by the attribution engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed for instance `{id}`: {message}")]
    Validation { id: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("oracle budget exhausted: {calls} of {limit} calls used")]
    Budget { calls: u64, limit: u64 },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("token alignment failed: expected {expected:?}, server returned {returned:?}")]
    Alignment {
        expected: Vec<String>,
        returned: Vec<String>,
    },

    #[error("replay store integrity error at key {key}: {reason}")]
    Integrity { key: String, reason: String },

    #[error("replay store has no entry for key {key} and no live oracle is configured")]
    ReplayMiss { key: String },

    #[error(
        "instance `{instance_id}` has an uninformative context \
         (full-context likelihood gain {denominator:e} is not positive)"
    )]
    UninformativeContext {
        instance_id: String,
        denominator: f64,
    },

    #[error("degenerate perturbation sample: {0}; try a different seed or more samples")]
    DegenerateSample(String),

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
