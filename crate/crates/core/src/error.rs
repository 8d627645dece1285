use thiserror::Error;

/// Which kernel matrix was found singular.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMatrix {
    Lambda,
    DeltaR,
}

impl std::fmt::Display for KernelMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelMatrix::Lambda => write!(f, "Lambda"),
            KernelMatrix::DeltaR => write!(f, "Delta_r"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{which} is numerically singular at omega = {omega} rad/s (condition estimate {cond:.3e})")]
    NearSingularFrequency {
        which: KernelMatrix,
        omega: f64,
        cond: f64,
    },

    #[error("resolvent (j{omega} I - A) is singular")]
    SingularResolvent { omega: f64 },

    #[error("tuning failed: {0}")]
    TuningFailed(String),

    #[error("no gain crossover on the grid")]
    NoCrossover,

    #[error("{0} gain crossovers on the grid, expected one")]
    MultipleCrossovers(usize),

    #[error("event storm: {count} reset events within one step ending at t = {t}")]
    EventStorm { t: f64, count: usize },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("divergence: |y| = {value:.3e} at t = {t}")]
    Divergence { t: f64, value: f64 },

    #[error("trace too short: {have} s available, {need} s required")]
    TooShort { have: f64, need: f64 },

    #[error("window of {window} s is not an integer number of periods of {period} s")]
    NonCommensurateWindow { window: f64, period: f64 },

    #[error("base linear closed loop is not asymptotically stable (max real part {max_re:.3e})")]
    BaseLinearUnstable { max_re: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
