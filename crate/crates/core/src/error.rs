use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {what} = {value}")]
    Domain { what: &'static str, value: f64 },

    /// A model was constructed with parameters that violate its invariants.
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    /// The density of an empirical model is undefined on one of its atoms.
    #[error("density unsupported at b = {0}: point coincides with an empirical atom")]
    UnsupportedPoint(f64),

    #[error("operation requires a first-price mechanism")]
    NotFirstPrice,

    #[error("no forecast available for batch {0}")]
    MissingForecast(usize),

    #[error("replayed spend is not monotone in lambda; offending record {record}")]
    NonMonotoneSpend { record: usize },

    #[error("guaranteed delivery of {required} results is infeasible; at most {max_achievable} reachable")]
    InfeasibleGuarantee { required: f64, max_achievable: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// A component failed while running an episode.
    #[error("interval {interval}: {message}")]
    AtInterval { interval: usize, message: String },
}

impl Error {
    pub fn at_interval(self, interval: usize) -> Self {
        match self {
            e @ Error::AtInterval { .. } => e,
            e => Error::AtInterval {
                interval,
                message: e.to_string(),
            },
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
