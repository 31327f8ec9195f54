use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("enumeration of {count} trajectories exceeds the cap of {cap}")]
    EnumerationTooLarge { count: String, cap: u64 },

    #[error("contract violation: {0}")]
    Contract(String),

    /// The self-referential partition iteration did not settle. Carries the
    /// sequence of `log Z` iterates.
    #[error("fixed-point partition estimate did not converge after {iterations} iterations (last log Z = {last})")]
    FixedPointDivergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    /// No sign change of the bias derivative was found. `samples` holds the
    /// probed `(b, dL/db)` pairs.
    #[error("could not bracket the discriminator bias minimiser; probed {} points", samples.len())]
    Bracketing { samples: Vec<(f64, f64)> },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
