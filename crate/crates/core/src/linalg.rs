//! Small dense solvers and scalar helpers shared by the fitting routines.
//! Problem sizes are tiny (tens of parameters), so unpivoted Cholesky on the
//! normal equations is enough.

use ndarray::{Array1, Array2};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Solve `a x = b` for symmetric positive-definite `a` via Cholesky with the
/// default pivot threshold.
pub(crate) fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    solve_spd_rcond(a, b, 1e-12)
}

/// Cholesky solve rejecting ill-conditioned systems: each pivot must retain
/// at least `rel_tol` of its column's original diagonal (scale-invariant),
/// otherwise `None` signals a numerically singular system.
pub(crate) fn solve_spd_rcond(
    a: &Array2<f64>,
    b: &Array1<f64>,
    rel_tol: f64,
) -> Option<Array1<f64>> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    debug_assert_eq!(b.len(), n);
    if (0..n).any(|i| !a[[i, i]].is_finite()) {
        return None;
    }
    // Lower-triangular factor, packed in place.
    let mut l = a.clone();
    for j in 0..n {
        let mut d = l[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > rel_tol * a[[j, j]]) || !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut v = l[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    // Forward then backward substitution.
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = l[[i, k]] * y[k];
            y[i] -= t;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[[k, i]] * y[k];
            y[i] -= t;
        }
        y[i] /= l[[i, i]];
    }
    Some(y)
}

/// Weighted least squares via the normal equations:
/// `argmin_b sum_i w_i (y_i - x_i . b)^2`.
pub(crate) fn solve_wls(
    x: &Array2<f64>,
    y: &Array1<f64>,
    w: &Array1<f64>,
) -> Option<Array1<f64>> {
    let p = x.ncols();
    let mut xtwx = Array2::zeros((p, p));
    let mut xtwy = Array1::zeros(p);
    for (i, row) in x.rows().into_iter().enumerate() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            xtwy[a] += wi * row[a] * y[i];
            for b in a..p {
                xtwx[[a, b]] += wi * row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[[a, b]] = xtwx[[b, a]];
        }
    }
    solve_spd(&xtwx, &xtwy)
}
