//! Weighted Bernoulli log-likelihood maximization with a fixed offset,
//! via iteratively reweighted least squares.

use ndarray::{Array1, Array2};

use super::SmootherError;
use crate::linalg::{sigmoid, solve_wls};

const MAX_ITERATIONS: usize = 100;
const DEVIANCE_TOL: f64 = 1e-10;
/// Coefficients beyond this magnitude flag a diverging (separated) fit.
const SEPARATION_BOUND: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: Array1<f64>,
    /// Fitted probabilities at the training points.
    pub fitted: Array1<f64>,
    pub deviance: f64,
    pub iterations: usize,
}

fn deviance(y: &Array1<f64>, mu: &Array1<f64>, w: &Array1<f64>) -> f64 {
    let mut dev = 0.0;
    for i in 0..y.len() {
        let m = mu[i].clamp(1e-300, 1.0 - 1e-16);
        dev -= 2.0 * w[i] * (y[i] * m.ln() + (1.0 - y[i]) * (1.0 - m).ln());
    }
    dev
}

pub fn weighted_logistic(
    x: &Array2<f64>,
    y: &Array1<f64>,
    w: &Array1<f64>,
    offset: &Array1<f64>,
) -> Result<LogisticFit, SmootherError> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || w.len() != n || offset.len() != n {
        return Err(SmootherError::DimensionMismatch);
    }
    if n < p {
        return Err(SmootherError::TooFewPoints { needed: p, got: n });
    }
    let mut beta: Array1<f64> = Array1::zeros(p);
    let mut eta = x.dot(&beta) + offset;
    let mut mu = eta.mapv(sigmoid);
    let mut dev = deviance(y, &mu, w);
    for iteration in 1..=MAX_ITERATIONS {
        let mut irls_w = Array1::zeros(n);
        let mut working = Array1::zeros(n);
        for i in 0..n {
            let variance = (mu[i] * (1.0 - mu[i])).max(1e-12);
            irls_w[i] = w[i] * variance;
            working[i] = eta[i] - offset[i] + (y[i] - mu[i]) / variance;
        }
        beta = solve_wls(x, &working, &irls_w).ok_or(SmootherError::FitSingular)?;
        eta = x.dot(&beta) + offset;
        mu = eta.mapv(sigmoid);
        let new_dev = deviance(y, &mu, w);
        let delta = (dev - new_dev).abs();
        dev = new_dev;
        // Complete separation: a perfect fit exists only at infinite
        // coefficients, so the deviance collapses to zero while beta grows.
        let separated = dev < 1e-6 || beta.iter().any(|b| b.abs() > SEPARATION_BOUND);
        if separated {
            let norm = beta.dot(&beta).sqrt().max(1e-300);
            return Err(SmootherError::DivergedToInfinity {
                direction: beta.iter().map(|b| b / norm).collect(),
            });
        }
        if delta < DEVIANCE_TOL {
            return Ok(LogisticFit {
                coefficients: beta,
                fitted: mu,
                deviance: dev,
                iterations: iteration,
            });
        }
    }
    Err(SmootherError::NotConverged(MAX_ITERATIONS))
}
