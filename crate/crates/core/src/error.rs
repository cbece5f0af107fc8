use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("system is not asymptotically stable (spectral radius {0})")]
    Unstable(f64),

    #[error("naive Lyapunov solver is limited to n <= {limit}, got n = {n}")]
    OracleTooLarge { n: usize, limit: usize },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("matrix is indefinite beyond tolerance (pivot {pivot:e} at index {index})")]
    Indefinite { index: usize, pivot: f64 },

    #[error("numerically uncontrollable pair: {0}")]
    Uncontrollable(String),

    #[error("requested order {requested} exceeds numerical rank {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
