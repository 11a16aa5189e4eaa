//! Stock-conditioned joint price/yield distributions via penalized
//! B-spline quantile regression.

pub mod bspline;
pub mod error;
pub mod joint_sampler;
pub mod linalg;
pub mod premium;
pub mod quantile_fit;
pub mod rng;
pub mod simstudy;
pub mod stats;
pub mod trend;

pub use error::{Error, Result};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
