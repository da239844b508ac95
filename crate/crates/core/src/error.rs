use thiserror::Error;

/// Errors produced by the CPC library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is numerically singular (condition estimate {cond:.3e})")]
    SingularMatrix { cond: f64 },
    #[error("least-squares system is rank deficient")]
    RankDeficient,
    #[error("polynomial has no non-constant terms")]
    DegeneratePolynomial,
    #[error("integration produced a non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("projected velocity product {value:.3e} is below the guard tolerance {guard:.1e}")]
    VelocityBarDegenerate { value: f64, guard: f64 },
    #[error("system is not fully actuated (rank {rank} < {n})")]
    NotFullyActuated { rank: usize, n: usize },
    #[error("dataset contains no points")]
    EmptyDataset,
    #[error("no candidate target passed the velocity guard")]
    NoValidCandidates,
    #[error("phasing variable has zero rate along the reference")]
    PhasingDegenerate,
    #[error("decoupling matrix of the virtual constraint is singular")]
    SingularDecoupling,
    #[error("dataset does not match the expected layout: {0}")]
    DatasetSchemaMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
