use thiserror::Error;

use crate::spectral::EigenPair;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    /// Outer iteration budget exhausted; `best` is the last iterate.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        best: Box<EigenPair<f64>>,
    },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no giant proxy: largest cluster has in-box density {density}")]
    NoGiant { density: f64 },
    #[error("density precondition failed in cell {cell:?}: {giant} giant sites vs {holes} holes")]
    DensityPrecondition {
        cell: Vec<i64>,
        giant: usize,
        holes: usize,
    },
    #[error("construction error: {0}")]
    Construction(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short status code used in the `status` column of run tables.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Convergence { .. } => "no_convergence",
            Error::Numerical(_) => "numerical",
            Error::Precondition(_) => "precondition",
            Error::NoGiant { .. } => "no_giant",
            Error::DensityPrecondition { .. } => "density_precondition",
            Error::Construction(_) => "construction",
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => "io",
        }
    }
}
