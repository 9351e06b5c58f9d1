//! Numerical substrate for the calibration regressions: weighted loess,
//! natural cubic spline bases, and weighted binary/multinomial logistic
//! solvers.

mod loess;
mod logistic;
mod multinomial;
mod spline;

pub use loess::{loess, LoessFit};
pub use logistic::{weighted_logistic, LogisticFit};
pub use multinomial::{weighted_multinomial, MultinomialFit};
pub use spline::{natural_spline_basis, SplineBasis};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmootherError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("span {span} gives a neighborhood of {window} points, need at least {needed}")]
    SpanTooSmall {
        span: f64,
        window: usize,
        needed: usize,
    },
    #[error("loess degree must be 1 or 2, got {0}")]
    InvalidDegree(usize),
    #[error("need at least {needed} distinct values, got {got}")]
    TooFewDistinct { needed: usize, got: usize },
    #[error("design matrix is rank deficient")]
    FitSingular,
    #[error("likelihood diverges to infinity (separation) along {direction:?}")]
    DivergedToInfinity { direction: Vec<f64> },
    #[error("solver failed to converge within {0} iterations")]
    NotConverged(usize),
    #[error("inputs have mismatched lengths")]
    DimensionMismatch,
}
