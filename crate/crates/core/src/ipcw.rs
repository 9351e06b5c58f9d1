//! Censoring-distribution estimation and inverse-probability-of-censoring
//! weights.
//!
//! The censoring process is modelled by reversing the roles of event and
//! censoring: an observed censoring is the "event", entry into an absorbing
//! state censors the censoring process at the absorption time, and subjects
//! still under follow-up contribute at their last observed time. Weights for
//! subjects with known horizon state are `1 / S_c(tau | z)` where `tau` is
//! the absorption time for absorbed subjects and the horizon otherwise.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Cohort, HorizonState};
use crate::dgm::DgmConfig;
use crate::linalg::solve_spd;

#[derive(Debug, Error)]
pub enum CoxError {
    #[error("information matrix is singular")]
    FitSingular,
    #[error("partial likelihood maximization diverged after {iterations} iterations (max |score| = {score:.3e})")]
    FitDiverged {
        iterations: usize,
        score: f64,
        trace: Vec<f64>,
    },
    #[error("need more observations than covariates (n = {n}, p = {p})")]
    TooFewObservations { n: usize, p: usize },
    #[error("covariate vector has {got} entries, model has {expected}")]
    CovariateMismatch { expected: usize, got: usize },
}

/// Non-decreasing step function, zero before the first jump.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(times.len(), values.len());
        debug_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        Self { times, values }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            0.0
        } else {
            self.values[idx - 1]
        }
    }

    pub fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }
}

/// Proportional-hazards model with Breslow baseline, fitted on covariates
/// centered at their means.
#[derive(Debug, Clone)]
pub struct CoxModel {
    pub coefficients: Vec<f64>,
    pub baseline_cumhaz: StepFunction,
    pub covariate_means: Vec<f64>,
}

impl CoxModel {
    fn linear_predictor(&self, z: &[f64]) -> f64 {
        self.coefficients
            .iter()
            .zip(z.iter().zip(&self.covariate_means))
            .map(|(b, (v, mean))| b * (v - mean))
            .sum()
    }
}

const MAX_NEWTON_ITERATIONS: usize = 50;
const SCORE_TOL: f64 = 1e-8;

/// Maximize the Breslow-tie partial likelihood by Newton-Raphson and return
/// the fitted model with its Breslow baseline cumulative hazard.
pub fn fit_cox(times: &[f64], status: &[u8], z: &Array2<f64>) -> Result<CoxModel, CoxError> {
    let n = times.len();
    let p = z.ncols();
    assert_eq!(status.len(), n, "status length mismatch");
    assert_eq!(z.nrows(), n, "covariate rows mismatch");
    if n <= p {
        return Err(CoxError::TooFewObservations { n, p });
    }
    let n_events = status.iter().filter(|&&s| s == 1).count();
    if n_events == 0 {
        return Err(CoxError::FitDiverged {
            iterations: 0,
            score: f64::NAN,
            trace: vec![],
        });
    }

    let means: Vec<f64> = (0..p).map(|j| z.column(j).mean().unwrap_or(0.0)).collect();
    let mut centered = z.clone();
    for j in 0..p {
        for i in 0..n {
            centered[[i, j]] -= means[j];
        }
    }

    // Descending time order; risk sets accumulate as we sweep.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut beta = Array1::zeros(p);
    if p > 0 {
        let mut trace = Vec::new();
        let mut converged = false;
        for iteration in 0..MAX_NEWTON_ITERATIONS {
            let (score, info) = score_and_information(&order, times, status, &centered, &beta);
            let max_score = score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            trace.push(max_score);
            // Unidentifiable designs (singular information) are an error even
            // when the score happens to vanish, e.g. a constant covariate.
            let step = solve_spd(&info, &score).ok_or(CoxError::FitSingular)?;
            if max_score < SCORE_TOL {
                converged = true;
                break;
            }
            beta += &step;
            if beta.iter().any(|b| !b.is_finite() || b.abs() > 1e3) {
                return Err(CoxError::FitDiverged {
                    iterations: iteration + 1,
                    score: max_score,
                    trace,
                });
            }
        }
        if !converged {
            // One more score evaluation decides whether the last step landed.
            let (score, _) = score_and_information(&order, times, status, &centered, &beta);
            let max_score = score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            if max_score >= SCORE_TOL {
                return Err(CoxError::FitDiverged {
                    iterations: MAX_NEWTON_ITERATIONS,
                    score: max_score,
                    trace,
                });
            }
        }
    }

    // Breslow baseline: jumps d_s / sum_{risk} exp(eta) at each event time.
    let eta: Vec<f64> = (0..n)
        .map(|i| {
            (0..p)
                .map(|j| centered[[i, j]] * beta[j])
                .sum::<f64>()
        })
        .collect();
    let mut jump_times = Vec::new();
    let mut jump_values = Vec::new();
    let mut s0 = 0.0;
    let mut idx = 0;
    let mut increments: Vec<(f64, f64)> = Vec::new();
    while idx < n {
        let t = times[order[idx]];
        let mut deaths = 0.0;
        while idx < n && times[order[idx]] == t {
            let i = order[idx];
            s0 += eta[i].exp();
            deaths += f64::from(status[i]);
            idx += 1;
        }
        if deaths > 0.0 {
            increments.push((t, deaths / s0));
        }
    }
    increments.reverse();
    let mut cum = 0.0;
    for (t, inc) in increments {
        cum += inc;
        jump_times.push(t);
        jump_values.push(cum);
    }

    Ok(CoxModel {
        coefficients: beta.to_vec(),
        baseline_cumhaz: StepFunction::new(jump_times, jump_values),
        covariate_means: means,
    })
}

fn score_and_information(
    order: &[usize],
    times: &[f64],
    status: &[u8],
    z: &Array2<f64>,
    beta: &Array1<f64>,
) -> (Array1<f64>, Array2<f64>) {
    let n = order.len();
    let p = z.ncols();
    let mut score: Array1<f64> = Array1::zeros(p);
    let mut info: Array2<f64> = Array2::zeros((p, p));
    let mut s0 = 0.0;
    let mut s1: Array1<f64> = Array1::zeros(p);
    let mut s2: Array2<f64> = Array2::zeros((p, p));
    let mut idx = 0;
    while idx < n {
        let t = times[order[idx]];
        let mut deaths = 0.0;
        while idx < n && times[order[idx]] == t {
            let i = order[idx];
            let row = z.row(i);
            let risk = row.dot(beta).exp();
            s0 += risk;
            for a in 0..p {
                s1[a] += risk * row[a];
                for b in a..p {
                    s2[[a, b]] += risk * row[a] * row[b];
                }
            }
            if status[i] == 1 {
                deaths += 1.0;
                for a in 0..p {
                    score[a] += row[a];
                }
            }
            idx += 1;
        }
        if deaths > 0.0 {
            for a in 0..p {
                let mean_a = s1[a] / s0;
                score[a] -= deaths * mean_a;
                for b in a..p {
                    let cov = s2[[a, b]] / s0 - mean_a * s1[b] / s0;
                    info[[a, b]] += deaths * cov;
                }
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[[a, b]] = info[[b, a]];
        }
    }
    (score, info)
}

/// `S_c(t | z) = exp(-Lambda0(t) * exp(beta . (z - mean)))`.
pub fn censoring_survival(model: &CoxModel, z: &[f64], t: f64) -> f64 {
    (-model.baseline_cumhaz.eval(t) * model.linear_predictor(z).exp()).exp()
}

/// Per-subject weights; `None` marks subjects whose horizon state is unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<Option<f64>>,
    pub cap: f64,
    /// Subjects whose estimated censoring survival underflowed to zero.
    pub zero_survival_count: usize,
}

impl WeightVector {
    /// All included subjects weighted 1 (the no-weights analysis).
    pub fn unit(cohort: &Cohort, t: f64) -> Self {
        let weights = cohort
            .horizon_states(t)
            .into_iter()
            .map(|s| match s {
                HorizonState::Known(_) => Some(1.0),
                HorizonState::Unknown => None,
            })
            .collect();
        WeightVector {
            weights,
            cap: f64::INFINITY,
            zero_survival_count: 0,
        }
    }

    pub fn to_csv(&self, ids: &[u64]) -> String {
        let mut out = String::from("id,weight\n");
        for (id, w) in ids.iter().zip(&self.weights) {
            match w {
                Some(v) => out.push_str(&format!("{id},{v}\n")),
                None => out.push_str(&format!("{id},\n")),
            }
        }
        out
    }
}

/// The time each subject's weight refers to: absorption time when absorbed at
/// or before `t`, otherwise `t`.
fn weight_time(cohort: &Cohort, idx: usize, t: f64) -> f64 {
    let s = &cohort.subjects()[idx];
    let (last_state, last_entry) = *s.path.last().expect("path non-empty");
    if cohort.structure().is_absorbing(last_state) && last_entry <= t {
        last_entry
    } else {
        t
    }
}

/// IPCW from a fitted censoring model, capped at `cap`.
pub fn compute_ipcw(cohort: &Cohort, model: &CoxModel, t: f64, cap: f64) -> WeightVector {
    assert!(cap >= 1.0, "cap must be at least 1, got {cap}");
    let mut zero_survival = 0usize;
    let weights = (0..cohort.n())
        .map(|i| match cohort.state_at(i, t) {
            HorizonState::Unknown => None,
            HorizonState::Known(_) => {
                let tau = weight_time(cohort, i, t);
                let surv = censoring_survival(model, &cohort.subjects()[i].covariates, tau);
                if surv <= 0.0 {
                    zero_survival += 1;
                    Some(cap)
                } else {
                    Some((1.0 / surv).min(cap))
                }
            }
        })
        .collect();
    WeightVector {
        weights,
        cap,
        zero_survival_count: zero_survival,
    }
}

/// Reversal of the observation process: censoring becomes the event,
/// absorption censors it, open-ended follow-up contributes at the last
/// observed time.
pub fn censoring_dataset(cohort: &Cohort) -> (Vec<f64>, Vec<u8>, Array2<f64>) {
    let n = cohort.n();
    let p = cohort.covariate_dim();
    let mut times = Vec::with_capacity(n);
    let mut status = Vec::with_capacity(n);
    let mut z = Array2::zeros((n, p));
    for (i, s) in cohort.subjects().iter().enumerate() {
        match s.censor_time {
            Some(c) => {
                times.push(c);
                status.push(1);
            }
            None => {
                times.push(s.last_entry_time());
                status.push(0);
            }
        }
        for (j, &v) in s.covariates.iter().enumerate() {
            z[[i, j]] = v;
        }
    }
    (times, status, z)
}

/// Weights from a Cox censoring model on all baseline covariates.
pub fn estimated_weights(cohort: &Cohort, t: f64, cap: f64) -> Result<WeightVector, CoxError> {
    let (times, status, z) = censoring_dataset(cohort);
    if status.iter().all(|&s| s == 0) {
        // No censoring events: the censoring survival is identically 1.
        return Ok(WeightVector::unit(cohort, t));
    }
    let model = fit_cox(&times, &status, &z)?;
    Ok(compute_ipcw(cohort, &model, t, cap))
}

/// Weights from a censoring model that ignores all covariates
/// (Nelson-Aalen baseline only).
pub fn misspecified_weights(cohort: &Cohort, t: f64, cap: f64) -> Result<WeightVector, CoxError> {
    let (times, status, _) = censoring_dataset(cohort);
    if status.iter().all(|&s| s == 0) {
        return Ok(WeightVector::unit(cohort, t));
    }
    let empty = Array2::zeros((times.len(), 0));
    let model = fit_cox(&times, &status, &empty)?;
    Ok(compute_ipcw(cohort, &model, t, cap))
}

/// Weights from the analytic censoring distribution of the data-generating
/// mechanism: `S_c(tau | z) = exp(-exp(beta_cens . z) * tau / lambda_C)`.
pub fn true_weights(cohort: &Cohort, config: &DgmConfig, t: f64, cap: f64) -> WeightVector {
    assert!(cap >= 1.0, "cap must be at least 1, got {cap}");
    let weights: Vec<Option<f64>> = (0..cohort.n())
        .into_par_iter()
        .map(|i| match cohort.state_at(i, t) {
            HorizonState::Unknown => None,
            HorizonState::Known(_) => {
                let tau = weight_time(cohort, i, t);
                let surv = match config.lambda_cens {
                    Some(lam) => {
                        let z = &cohort.subjects()[i].covariates;
                        let rate: f64 = config
                            .beta_cens
                            .iter()
                            .zip(z)
                            .map(|(b, v)| b * v)
                            .sum::<f64>()
                            .exp()
                            / lam;
                        (-rate * tau).exp()
                    }
                    None => 1.0,
                };
                Some((1.0 / surv).min(cap))
            }
        })
        .collect();
    WeightVector {
        weights,
        cap,
        zero_survival_count: 0,
    }
}
