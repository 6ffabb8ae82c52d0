use std::fmt;

use thiserror::Error;

/// Function slots a unit model may provide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Rinit,
    Rprocess,
    Rmeasure,
    Dmeasure,
    Dinit,
    Dprocess,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Slot::Rinit => "rinit",
            Slot::Rprocess => "rprocess",
            Slot::Rmeasure => "rmeasure",
            Slot::Dmeasure => "dmeasure",
            Slot::Dinit => "dinit",
            Slot::Dprocess => "dprocess",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed parameter name `{0}`")]
    NameFormat(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{name}` = {value} is outside the domain of the {transform} transform")]
    TransformDomain {
        name: String,
        value: f64,
        transform: &'static str,
    },

    #[error("invalid bounds for `{name}`: lower {lower} > upper {upper}")]
    Bounds { name: String, lower: f64, upper: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("panel construction failed: {0}")]
    Construction(String),

    #[error("unit `{unit}` does not provide the {slot} slot")]
    MissingSlot { unit: String, slot: Slot },

    #[error("unit `{unit}` is not a {expected} model")]
    Capability { unit: String, expected: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("measurement noise is zero; the measurement density is degenerate")]
    DegenerateMeasurement,

    #[error("particle filter failed for unit `{unit}` at observation {time_index}: all weights zero or non-finite")]
    FilterFailure { unit: String, time_index: usize },

    #[error("{failures} filtering failures exceeded the threshold of {threshold}")]
    FailureThreshold { failures: usize, threshold: usize },

    #[error("smoothing failed: {0}")]
    Smoothing(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
