use thiserror::Error;

use crate::bspline::BasisError;
use crate::quantile_fit::FitError;
use crate::trend::TrendError;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-level error for the pipeline modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Trend(#[from] TrendError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("jackknife group {group} failed: {source}")]
    JackknifeGroup {
        group: usize,
        #[source]
        source: Box<Error>,
    },
}
