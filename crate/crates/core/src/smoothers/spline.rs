//! Natural cubic spline basis with `df` degrees of freedom: a linear column
//! plus `df - 1` curvature terms from the truncated-power construction, with
//! interior knots at quantiles and linearity enforced beyond the boundary
//! knots.

use ndarray::Array2;

use super::SmootherError;

#[derive(Debug, Clone)]
pub struct SplineBasis {
    pub df: usize,
    /// Interior knots (quantiles of the training inputs).
    pub knots: Vec<f64>,
    pub boundary: (f64, f64),
    /// n x df design block for the training inputs.
    pub basis: Array2<f64>,
}

impl SplineBasis {
    /// Evaluate the basis at new points; linear beyond the boundary knots.
    pub fn evaluate(&self, x: &[f64]) -> Array2<f64> {
        let mut all_knots = Vec::with_capacity(self.knots.len() + 2);
        all_knots.push(self.boundary.0);
        all_knots.extend_from_slice(&self.knots);
        all_knots.push(self.boundary.1);
        evaluate_basis(x, &all_knots, self.df)
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn evaluate_basis(x: &[f64], knots: &[f64], df: usize) -> Array2<f64> {
    let k_count = knots.len();
    debug_assert_eq!(k_count, df + 1);
    let last = knots[k_count - 1];
    let penultimate = knots[k_count - 2];
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    // d_k(x) = [ (x - xi_k)+^3 - (x - xi_last)+^3 ] / (xi_last - xi_k)
    let d = |x: f64, knot: f64| (cube(x - knot) - cube(x - last)) / (last - knot);
    let mut out = Array2::zeros((x.len(), df));
    for (i, &xi) in x.iter().enumerate() {
        out[[i, 0]] = xi;
        for j in 1..df {
            out[[i, j]] = d(xi, knots[j - 1]) - d(xi, penultimate);
        }
    }
    out
}

/// Build the natural cubic basis from `x`, placing `df - 1` interior knots at
/// the `j / df` quantiles and boundary knots at the extremes.
pub fn natural_spline_basis(x: &[f64], df: usize) -> Result<SplineBasis, SmootherError> {
    if df < 2 {
        return Err(SmootherError::TooFewDistinct { needed: 2, got: df });
    }
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < df + 1 {
        return Err(SmootherError::TooFewDistinct {
            needed: df + 1,
            got: sorted.len(),
        });
    }
    let mut knots = Vec::with_capacity(df + 1);
    knots.push(sorted[0]);
    for j in 1..df {
        knots.push(quantile_sorted(&sorted, j as f64 / df as f64));
    }
    knots.push(sorted[sorted.len() - 1]);
    for pair in knots.windows(2) {
        if !(pair[1] > pair[0]) {
            return Err(SmootherError::TooFewDistinct {
                needed: df + 1,
                got: sorted.len(),
            });
        }
    }
    let basis = evaluate_basis(x, &knots, df);
    Ok(SplineBasis {
        df,
        knots: knots[1..df].to_vec(),
        boundary: (knots[0], knots[df]),
        basis,
    })
}
