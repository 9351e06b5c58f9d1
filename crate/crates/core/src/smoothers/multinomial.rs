//! Weighted multinomial logistic regression by Fisher scoring with the full
//! block information matrix. Category 1 is the reference; equation k (for
//! category k+1) has its own design block and offset. A small ridge is added
//! when the information matrix is numerically singular, which happens when
//! the spline blocks of strongly dependent log-ratio scores overlap.

use ndarray::{Array1, Array2};

use super::SmootherError;

const MAX_ITERATIONS: usize = 100;
const DEVIANCE_TOL: f64 = 1e-10;
const RIDGE: f64 = 1e-3;
/// Minimum fraction of a column's diagonal a Cholesky pivot must keep before
/// the information matrix counts as singular and the ridge engages.
const CONDITION_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct MultinomialFit {
    /// Coefficient vector per equation (categories 2..=K).
    pub coefficients: Vec<Array1<f64>>,
    /// n x K fitted category probabilities, reference in column 0.
    pub fitted: Array2<f64>,
    pub deviance: f64,
    pub iterations: usize,
    /// Set when the ridge fallback was needed to invert the information
    /// matrix.
    pub ridged: bool,
}

struct Workspace {
    /// Linear predictors per equation.
    eta: Vec<Array1<f64>>,
    /// n x K probabilities.
    mu: Array2<f64>,
}

fn probabilities(etas: &[Array1<f64>], n: usize) -> Array2<f64> {
    let k_minus_1 = etas.len();
    let mut mu = Array2::zeros((n, k_minus_1 + 1));
    for i in 0..n {
        let mut max_eta = 0.0f64;
        for eta in etas {
            max_eta = max_eta.max(eta[i]);
        }
        let mut denom = (-max_eta).exp();
        for eta in etas {
            denom += (eta[i] - max_eta).exp();
        }
        mu[[i, 0]] = (-max_eta).exp() / denom;
        for (e, eta) in etas.iter().enumerate() {
            mu[[i, e + 1]] = (eta[i] - max_eta).exp() / denom;
        }
    }
    mu
}

fn deviance(y: &[usize], mu: &Array2<f64>, w: &Array1<f64>) -> f64 {
    let mut dev = 0.0;
    for (i, &cat) in y.iter().enumerate() {
        dev -= 2.0 * w[i] * mu[[i, cat - 1]].max(1e-300).ln();
    }
    dev
}

/// Fit the model; `y` holds categories in `1..=K`, `designs[e]` and
/// `offsets[e]` describe equation `e` for category `e + 2`.
pub fn weighted_multinomial(
    designs: &[Array2<f64>],
    y: &[usize],
    w: &Array1<f64>,
    offsets: &[Array1<f64>],
) -> Result<MultinomialFit, SmootherError> {
    let k_minus_1 = designs.len();
    if k_minus_1 == 0 || offsets.len() != k_minus_1 {
        return Err(SmootherError::DimensionMismatch);
    }
    let n = y.len();
    let k = k_minus_1 + 1;
    for (design, offset) in designs.iter().zip(offsets) {
        if design.nrows() != n || offset.len() != n {
            return Err(SmootherError::DimensionMismatch);
        }
    }
    if w.len() != n || y.iter().any(|&c| c == 0 || c > k) {
        return Err(SmootherError::DimensionMismatch);
    }

    let dims: Vec<usize> = designs.iter().map(|d| d.ncols()).collect();
    let total: usize = dims.iter().sum();
    let starts: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &d| {
            let s = *acc;
            *acc += d;
            Some(s)
        })
        .collect();

    let mut beta: Vec<Array1<f64>> = dims.iter().map(|&d| Array1::zeros(d)).collect();
    let mut state = update_workspace(designs, offsets, &beta, n);
    let mut dev = deviance(y, &state.mu, w);
    let mut ridged = false;

    for iteration in 1..=MAX_ITERATIONS {
        // Score and expected information over all equations.
        let mut score = Array1::zeros(total);
        let mut info = Array2::zeros((total, total));
        for i in 0..n {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            for a in 0..k_minus_1 {
                let mu_a = state.mu[[i, a + 1]];
                let ya = f64::from(y[i] == a + 2);
                let row_a = designs[a].row(i);
                for (p, &xv) in row_a.iter().enumerate() {
                    score[starts[a] + p] += wi * (ya - mu_a) * xv;
                }
                for b in a..k_minus_1 {
                    let mu_b = state.mu[[i, b + 1]];
                    let cov = if a == b {
                        mu_a * (1.0 - mu_a)
                    } else {
                        -mu_a * mu_b
                    };
                    if cov == 0.0 {
                        continue;
                    }
                    let row_b = designs[b].row(i);
                    for (p, &xa) in row_a.iter().enumerate() {
                        let base = wi * cov * xa;
                        for (q, &xb) in row_b.iter().enumerate() {
                            info[[starts[a] + p, starts[b] + q]] += base * xb;
                        }
                    }
                }
            }
        }
        for a in 0..total {
            for b in 0..a {
                info[[a, b]] = info[[b, a]];
            }
        }

        // Strongly dependent log-ratio scores make the spline blocks of
        // different equations near-copies of each other; flat directions
        // would blow up the Newton step, so ill-conditioned systems fall
        // back to a damped solve.
        let step = match crate::linalg::solve_spd_rcond(&info, &score, CONDITION_TOL) {
            Some(step) => step,
            None => {
                ridged = true;
                let mut damped = info.clone();
                for d in 0..total {
                    damped[[d, d]] += RIDGE * (1.0 + damped[[d, d]].abs());
                }
                crate::linalg::solve_spd(&damped, &score).ok_or(SmootherError::FitSingular)?
            }
        };

        // Step-halving: accept only strict deviance decreases, so flat
        // (null-space) directions cannot drag the coefficients away.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial: Vec<Array1<f64>> = beta
                .iter()
                .enumerate()
                .map(|(e, b)| {
                    let mut t = b.clone();
                    for p in 0..dims[e] {
                        t[p] += scale * step[starts[e] + p];
                    }
                    t
                })
                .collect();
            let trial_state = update_workspace(designs, offsets, &trial, n);
            let trial_dev = deviance(y, &trial_state.mu, w);
            if trial_dev < dev {
                let delta = dev - trial_dev;
                beta = trial;
                state = trial_state;
                dev = trial_dev;
                accepted = true;
                // A vanishing deviance means the data are completely
                // separated: the perfect fit exists only at infinity.
                if dev < 1e-6 {
                    let flat: Vec<f64> = beta.iter().flat_map(|b| b.iter().copied()).collect();
                    let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                    return Err(SmootherError::DivergedToInfinity {
                        direction: flat.into_iter().map(|v| v / norm).collect(),
                    });
                }
                if delta < DEVIANCE_TOL {
                    return Ok(MultinomialFit {
                        coefficients: beta,
                        fitted: state.mu,
                        deviance: dev,
                        iterations: iteration,
                        ridged,
                    });
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No productive step left; treat the current point as converged.
            return Ok(MultinomialFit {
                coefficients: beta,
                fitted: state.mu,
                deviance: dev,
                iterations: iteration,
                ridged,
            });
        }
    }
    // Tail regions with vanishing category probabilities can keep improving
    // the deviance microscopically while the tail coefficients drift; the
    // iteration cap is part of the stopping rule and the interior fitted
    // values are stable by this point.
    Ok(MultinomialFit {
        fitted: state.mu,
        coefficients: beta,
        deviance: dev,
        iterations: MAX_ITERATIONS,
        ridged,
    })
}

fn update_workspace(
    designs: &[Array2<f64>],
    offsets: &[Array1<f64>],
    beta: &[Array1<f64>],
    n: usize,
) -> Workspace {
    let eta: Vec<Array1<f64>> = designs
        .iter()
        .zip(offsets)
        .zip(beta)
        .map(|((x, o), b)| x.dot(b) + o)
        .collect();
    let mu = probabilities(&eta, n);
    Workspace { eta, mu }
}

impl Workspace {
    #[allow(dead_code)]
    fn eta(&self) -> &[Array1<f64>] {
        &self.eta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothers::weighted_logistic;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn intercept_designs(n: usize, k_minus_1: usize) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let designs = vec![Array2::from_elem((n, 1), 1.0); k_minus_1];
        let offsets = vec![Array1::zeros(n); k_minus_1];
        (designs, offsets)
    }

    #[test]
    fn intercept_only_recovers_log_frequency_ratios() {
        // Frequencies (0.5, 0.3, 0.2) over 100 subjects.
        let mut y = Vec::new();
        y.extend(std::iter::repeat_n(1usize, 50));
        y.extend(std::iter::repeat_n(2usize, 30));
        y.extend(std::iter::repeat_n(3usize, 20));
        let (designs, offsets) = intercept_designs(100, 2);
        let fit =
            weighted_multinomial(&designs, &y, &Array1::from_elem(100, 1.0), &offsets).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0][0], -0.5108256237659907, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.coefficients[1][0], -0.916290731874155, epsilon = 1e-8);
    }

    #[test]
    fn fitted_rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let n = 200;
        let mut designs = vec![Array2::zeros((n, 2)), Array2::zeros((n, 2))];
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let v: f64 = rng.random_range(-1.0..1.0);
            for d in designs.iter_mut() {
                d[[i, 0]] = 1.0;
                d[[i, 1]] = v;
            }
            y.push(1 + (rng.random_range(0..3)) as usize);
        }
        let offsets = vec![Array1::zeros(n); 2];
        let fit =
            weighted_multinomial(&designs, &y, &Array1::from_elem(n, 1.0), &offsets).unwrap();
        for i in 0..n {
            let sum: f64 = fit.fitted.row(i).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn binary_case_matches_weighted_logistic() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let n = 400;
        let mut design = Array2::zeros((n, 2));
        let mut y_cat = Vec::with_capacity(n);
        let mut y_bin = Array1::zeros(n);
        let mut offset = Array1::zeros(n);
        let w = Array1::from_iter((0..n).map(|i| 1.0 + (i % 4) as f64 / 2.0));
        for i in 0..n {
            let v: f64 = rng.random_range(-2.0..2.0);
            design[[i, 0]] = 1.0;
            design[[i, 1]] = v;
            offset[i] = 0.3 * v.cos();
            let p = crate::linalg::sigmoid(0.5 + 0.9 * v + offset[i]);
            let hit = rng.random::<f64>() < p;
            y_cat.push(if hit { 2 } else { 1 });
            y_bin[i] = f64::from(hit);
        }
        let multi = weighted_multinomial(
            &[design.clone()],
            &y_cat,
            &w,
            std::slice::from_ref(&offset),
        )
        .unwrap();
        let binary = weighted_logistic(&design, &y_bin, &w, &offset).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(
                multi.coefficients[0][j],
                binary.coefficients[j],
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn score_vanishes_at_solution_and_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let n = 300;
        let mut designs = vec![Array2::zeros((n, 2)), Array2::zeros((n, 2))];
        let mut y = Vec::with_capacity(n);
        let w = Array1::from_iter((0..n).map(|i| 1.0 + (i % 2) as f64));
        for i in 0..n {
            let v: f64 = rng.random_range(-1.5..1.5);
            for d in designs.iter_mut() {
                d[[i, 0]] = 1.0;
                d[[i, 1]] = v;
            }
            let e2 = (0.4 + 0.8 * v).exp();
            let e3 = (-0.2 - 0.5 * v).exp();
            let denom = 1.0 + e2 + e3;
            let u: f64 = rng.random();
            y.push(if u < 1.0 / denom {
                1
            } else if u < (1.0 + e2) / denom {
                2
            } else {
                3
            });
        }
        let offsets = vec![Array1::zeros(n); 2];
        let fit = weighted_multinomial(&designs, &y, &w, &offsets).unwrap();

        let loglik = |b2: &Array1<f64>, b3: &Array1<f64>| {
            let mut ll = 0.0;
            for i in 0..n {
                let eta2 = designs[0].row(i).dot(b2);
                let eta3 = designs[1].row(i).dot(b3);
                let denom = 1.0 + eta2.exp() + eta3.exp();
                let mu = match y[i] {
                    1 => 1.0 / denom,
                    2 => eta2.exp() / denom,
                    _ => eta3.exp() / denom,
                };
                ll += w[i] * mu.ln();
            }
            ll
        };
        // Analytic score per block.
        for (block, other) in [(0usize, 1usize), (1, 0)] {
            for p in 0..2 {
                let mut up = fit.coefficients[block].clone();
                up[p] += 1e-6;
                let mut down = fit.coefficients[block].clone();
                down[p] -= 1e-6;
                let (fd_up, fd_down) = if block == 0 {
                    (
                        loglik(&up, &fit.coefficients[other]),
                        loglik(&down, &fit.coefficients[other]),
                    )
                } else {
                    (
                        loglik(&fit.coefficients[other], &up),
                        loglik(&fit.coefficients[other], &down),
                    )
                };
                let fd = (fd_up - fd_down) / 2e-6;
                assert!(fd.abs() < 1e-4, "score via FD {fd} not ~0");
            }
        }
    }

    #[test]
    fn collinear_blocks_use_ridge_instead_of_failing() {
        // Identical design blocks duplicated inside one equation.
        let n = 100;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(12);
        let mut design = Array2::zeros((n, 3));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let v: f64 = rng.random_range(-1.0..1.0);
            design[[i, 0]] = 1.0;
            design[[i, 1]] = v;
            design[[i, 2]] = v; // exact copy
            y.push(1 + usize::from(rng.random::<f64>() < crate::linalg::sigmoid(v)));
        }
        let offsets = vec![Array1::zeros(n)];
        let fit = weighted_multinomial(&[design], &y, &Array1::from_elem(n, 1.0), &offsets)
            .unwrap();
        assert!(fit.ridged);
        for i in 0..n {
            assert_abs_diff_eq!(fit.fitted.row(i).sum(), 1.0, epsilon = 1e-12);
        }
    }
}
