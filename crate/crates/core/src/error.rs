use thiserror::Error;

/// Which variance component an error or flag refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    A,
    B,
    E,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::A => "sigma2_a",
            Component::B => "sigma2_b",
            Component::E => "sigma2_e",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no observations")]
    EmptyData,
    #[error("non-finite value {0}")]
    NonFiniteValue(f64),
    #[error("duplicate cell ({row}, {col})")]
    DuplicateCell { row: String, col: String },
    #[error("{factor} key {key} was not seen in the first pass")]
    UnknownKey { factor: &'static str, key: String },
    #[error("second-pass stream does not match the first pass ({0})")]
    StreamMismatch(String),
    #[error("aggregate overflow in {0}")]
    Overflow(&'static str),
    #[error("moment system is singular: {reason}")]
    SingularSystem { reason: String, unidentified: Vec<Component> },
    #[error("kurtosis of {0} is undefined (variance estimate not positive)")]
    UndefinedKurtosis(Component),
    #[error("balance ratio delta = {delta} exceeds threshold {delta0}")]
    DeltaTooLarge { delta: f64, delta0: f64 },
    #[error("prediction system is singular")]
    SingularPredictionSystem,
    #[error("target cell is not observed")]
    NotObserved,
    #[error("instance too large for dense oracle ({size} > {limit})")]
    InstanceTooLarge { size: u64, limit: u64 },
    #[error("chain too short: {len} post burn-in draws, need {min}")]
    ChainTooShort { len: usize, min: usize },
    #[error("autocorrelation undefined: chain functional has zero variance")]
    DegenerateChain,
    #[error("data is not a full balanced grid")]
    NonBalancedData,
    #[error("summary sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
