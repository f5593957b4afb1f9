use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent. `field` is a
    /// dotted path into the configuration (e.g. `demand.intervals[2].factor`).
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    /// A vehicle route references links that are not connected by a movement.
    #[error("route corruption for vehicle {vehicle}: no movement from link {from} to link {to}")]
    RouteCorruption { vehicle: u32, from: u32, to: u32 },

    #[error("no path from centroid {origin} to centroid {destination}")]
    NoPath { origin: u32, destination: u32 },

    /// The simulation state broke one of its conservation or storage invariants.
    #[error("invariant violated at step {step}: {message}")]
    Invariant { step: u64, message: String },

    #[error("percent change is undefined for baseline {0}")]
    UndefinedBaseline(f64),

    #[error("stability horizon of {0} steps is shorter than the 5000-step minimum")]
    HorizonTooShort(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Parse { .. } | Error::NoPath { .. } | Error::HorizonTooShort(_)
        )
    }

    pub fn is_invariant(&self) -> bool {
        matches!(self, Error::Invariant { .. } | Error::RouteCorruption { .. })
    }
}
