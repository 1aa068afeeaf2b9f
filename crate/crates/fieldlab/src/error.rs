//! Crate-wide error type.
//!
//! Constructors across the crate validate their inputs eagerly (dimension
//! conformance, domain restrictions such as `dt > 0`, configuration sanity)
//! and surface violations through [`Error`] rather than panicking. Panics are
//! reserved for internal invariant breaches that indicate a bug.

/// Unified error type for the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two objects that must share a shape or a [`crate::space::GalerkinSpace`] do not.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A scalar argument lies outside its mathematical domain (e.g. `dt ≤ 0`).
    #[error("domain error in {context}: {message}")]
    Domain {
        context: &'static str,
        message: String,
    },

    /// Configuration file or configuration values are invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An iterative numerical procedure failed to produce a usable result
    /// (non-finite values, singular regression system, Picard divergence, …).
    #[error("numerical failure in {context}: {message}")]
    Numerical {
        context: &'static str,
        message: String,
    },

    /// Filesystem or serialization trouble while reading configs or writing artifacts.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// TOML configuration parse failure.
    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    /// JSON artifact serialization failure.
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV schedule parse failure.
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Shorthand for a domain error.
    pub fn domain(context: &'static str, message: impl Into<String>) -> Self {
        Error::Domain {
            context,
            message: message.into(),
        }
    }

    /// Shorthand for a numerical failure.
    pub fn numerical(context: &'static str, message: impl Into<String>) -> Self {
        Error::Numerical {
            context,
            message: message.into(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
