//! Weighted local-polynomial regression with a tricube kernel. Each point is
//! fitted from its `ceil(span * n)` nearest neighbors; kernel weights
//! multiply the caller's regression weights, which is how IPCW enters the
//! calibration curves.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use super::SmootherError;
use crate::linalg::solve_wls;

#[derive(Debug, Clone)]
pub struct LoessFit {
    pub span: f64,
    pub degree: usize,
    /// Fitted value at each input point, in input order.
    pub fitted: Vec<f64>,
    /// Evaluation abscissae in ascending order.
    pub x_sorted: Vec<f64>,
    /// Points where the local design was singular and the fit fell back to a
    /// local weighted mean.
    pub fallback_count: usize,
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

pub fn loess(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    span: f64,
    degree: usize,
) -> Result<LoessFit, SmootherError> {
    let n = x.len();
    if y.len() != n || w.len() != n {
        return Err(SmootherError::DimensionMismatch);
    }
    if !(1..=2).contains(&degree) {
        return Err(SmootherError::InvalidDegree(degree));
    }
    let needed = degree + 2;
    if n < needed {
        return Err(SmootherError::TooFewPoints { needed, got: n });
    }
    let window = (span * n as f64).ceil() as usize;
    if window < needed {
        return Err(SmootherError::SpanTooSmall {
            span,
            window,
            needed,
        });
    }
    let window = window.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let ws: Vec<f64> = order.iter().map(|&i| w[i]).collect();

    let results: Vec<(f64, bool)> = (0..n)
        .into_par_iter()
        .map(|i| fit_local(&xs, &ys, &ws, i, window, degree))
        .collect();

    let mut fitted = vec![0.0; n];
    let mut fallback_count = 0;
    for (rank, &(value, fell_back)) in results.iter().enumerate() {
        fitted[order[rank]] = value;
        fallback_count += usize::from(fell_back);
    }
    Ok(LoessFit {
        span,
        degree,
        fitted,
        x_sorted: xs,
        fallback_count,
    })
}

/// Local fit at sorted position `i`. Returns the fitted value and whether the
/// degenerate-neighborhood fallback fired.
fn fit_local(xs: &[f64], ys: &[f64], ws: &[f64], i: usize, window: usize, degree: usize) -> (f64, bool) {
    let n = xs.len();
    let x0 = xs[i];
    // Nearest `window` points are contiguous around i in sorted order.
    let (mut lo, mut hi) = (i, i + 1);
    while hi - lo < window {
        let extend_left = if lo == 0 {
            false
        } else if hi == n {
            true
        } else {
            x0 - xs[lo - 1] <= xs[hi] - x0
        };
        if extend_left {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    let bandwidth = (x0 - xs[lo]).max(xs[hi - 1] - x0);

    let m = hi - lo;
    let mut kernel = vec![0.0; m];
    for (j, k) in kernel.iter_mut().enumerate() {
        let d = (xs[lo + j] - x0).abs();
        *k = if bandwidth == 0.0 {
            ws[lo + j]
        } else {
            tricube(d / bandwidth) * ws[lo + j]
        };
    }

    let mut design = Array2::zeros((m, degree + 1));
    for j in 0..m {
        let u = xs[lo + j] - x0;
        design[[j, 0]] = 1.0;
        design[[j, 1]] = u;
        if degree == 2 {
            design[[j, 2]] = u * u;
        }
    }
    let target = Array1::from_iter(ys[lo..hi].iter().copied());
    let weights = Array1::from_vec(kernel.clone());
    if let Some(beta) = solve_wls(&design, &target, &weights) {
        (beta[0], false)
    } else {
        let wsum: f64 = kernel.iter().sum();
        if wsum > 0.0 {
            let mean = kernel
                .iter()
                .zip(&ys[lo..hi])
                .map(|(k, y)| k * y)
                .sum::<f64>()
                / wsum;
            (mean, true)
        } else {
            let mean = ys[lo..hi].iter().sum::<f64>() / m as f64;
            (mean, true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn local_linear_reproduces_affine_data() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let w = vec![1.0; 50];
        for (span, degree) in [(0.3, 1), (0.75, 1), (1.0, 2)] {
            let fit = loess(&x, &y, &w, span, degree).unwrap();
            for (f, target) in fit.fitted.iter().zip(&y) {
                assert_abs_diff_eq!(f, target, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn constant_data_fits_flat() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sqrt()).collect();
        let y = vec![0.7; 30];
        let w = vec![1.0; 30];
        let fit = loess(&x, &y, &w, 0.5, 2).unwrap();
        for f in fit.fitted {
            assert_abs_diff_eq!(f, 0.7, epsilon = 1e-10);
        }
    }

    /// Brute-force normal-equations oracle for the local fit at one point:
    /// explicitly form X'WX and X'Wy over the same neighborhood and solve by
    /// Cramer's rule on the 3x3 system.
    fn oracle_fit_at(x: &[f64], y: &[f64], w: &[f64], i: usize, span: f64) -> f64 {
        let n = x.len();
        let window = (span * n as f64).ceil() as usize;
        let x0 = x[i];
        let mut dist: Vec<(f64, usize)> = (0..n).map(|j| ((x[j] - x0).abs(), j)).collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let neighbors: Vec<usize> = dist[..window].iter().map(|&(_, j)| j).collect();
        let h = dist[window - 1].0;
        let kw: Vec<f64> = neighbors
            .iter()
            .map(|&j| {
                let u = (x[j] - x0).abs() / h;
                let t: f64 = 1.0 - u * u * u;
                if u < 1.0 { t.powi(3) * w[j] } else { 0.0 }
            })
            .collect();
        // 3x3 normal equations in powers of (x - x0).
        let mut a = [[0.0f64; 3]; 3];
        let mut b = [0.0f64; 3];
        for (idx, &j) in neighbors.iter().enumerate() {
            let u = x[j] - x0;
            let pows = [1.0, u, u * u];
            for r in 0..3 {
                b[r] += kw[idx] * pows[r] * y[j];
                for c in 0..3 {
                    a[r][c] += kw[idx] * pows[r] * pows[c];
                }
            }
        }
        let det = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(&a);
        let mut a0 = a;
        for r in 0..3 {
            a0[r][0] = b[r];
        }
        det(&a0) / d
    }

    #[test]
    fn interior_fit_matches_normal_equations_oracle() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| i as f64 + rng.random::<f64>() * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| (v / 7.0).sin() + rng.random::<f64>() * 0.1).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let fit = loess(&x, &y, &w, 0.4, 2).unwrap();
        for i in [10, 25, 40] {
            let expected = oracle_fit_at(&x, &y, &w, i, 0.4);
            assert_abs_diff_eq!(fit.fitted[i], expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn degenerate_neighborhood_falls_back_to_weighted_mean() {
        let x = vec![1.0; 8];
        let y = vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let w = vec![1.0; 8];
        let fit = loess(&x, &y, &w, 1.0, 1).unwrap();
        assert!(fit.fallback_count > 0);
        for f in fit.fitted {
            assert_abs_diff_eq!(f, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_undersized_problems() {
        let x = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            loess(&x, &x, &[1.0; 3], 0.75, 2),
            Err(SmootherError::TooFewPoints { .. })
        ));
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(matches!(
            loess(&x, &x, &[1.0; 20].to_vec(), 0.1, 2),
            Err(SmootherError::SpanTooSmall { .. })
        ));
    }

    proptest! {
        // Affine equivariance: transforming y maps the fit by the same
        // transform; rescaling all weights leaves the fit unchanged.
        #[test]
        fn affine_equivariant_and_weight_scale_invariant(
            seed in 0u64..200,
            a in -3.0f64..3.0,
            b in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let n = 25;
            let x: Vec<f64> = (0..n).map(|i| i as f64 + rng.random::<f64>()).collect();
            let y: Vec<f64> = x.iter().map(|v| (v / 3.0).cos() + rng.random::<f64>()).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
            let base = loess(&x, &y, &w, 0.6, 2).unwrap();

            let y2: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            let transformed = loess(&x, &y2, &w, 0.6, 2).unwrap();
            for (f, f2) in base.fitted.iter().zip(&transformed.fitted) {
                prop_assert!((a * f + b - f2).abs() < 1e-8 * (1.0 + f2.abs()));
            }

            let w2: Vec<f64> = w.iter().map(|v| v * scale).collect();
            let rescaled = loess(&x, &y, &w2, 0.6, 2).unwrap();
            for (f, f2) in base.fitted.iter().zip(&rescaled.fitted) {
                prop_assert!((f - f2).abs() < 1e-9 * (1.0 + f2.abs()));
            }
        }
    }
}
