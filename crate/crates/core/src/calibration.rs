//! The four calibration methods. Aalen-Johansen contrasts live in
//! [`crate::aalen_johansen`]; this module adds pseudo-values, BLR-IPCW and
//! MLR-IPCW, each producing moderate (curve or scatter), mean, and weak
//! summaries, plus the bootstrap standard errors of the mean calibration.
//!
//! Pseudo-value and Aalen-Johansen methods use the full cohort (censoring is
//! handled by the estimator, within risk groups); BLR and MLR use only the
//! subjects whose horizon state is known, reweighted by IPCW.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::aalen_johansen::{
    aj_loo_on_subset, aj_mean_calibration, aj_moderate_points, aj_on_subset, make_risk_groups,
    EstimatorError, RiskGrouping,
};
use crate::data::{clamp_predictions, Cohort, DataError, PredictionMatrix, DEFAULT_CLAMP_EPS};
use crate::dgm::{self, DgmConfig};
use crate::ipcw::{self, CoxError, WeightVector};
use crate::linalg::{logit, sigmoid};
use crate::smoothers::{loess, weighted_logistic, weighted_multinomial, SmootherError};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Smoother(#[from] SmootherError),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("subject at index {0} is included at the horizon but has no weight")]
    MissingWeight(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bootstrap needs at least 50 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("bootstrap unstable: only {successes} of {total} replicates succeeded")]
    BootstrapUnstable { successes: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Aj,
    Pv,
    Blr,
    Mlr,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Aj => "aj",
            Method::Pv => "pv",
            Method::Blr => "blr",
            Method::Mlr => "mlr",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "aj" => Ok(Method::Aj),
            "pv" => Ok(Method::Pv),
            "blr" => Ok(Method::Blr),
            "mlr" => Ok(Method::Mlr),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

/// Weak-calibration summary: slope, with an intercept when the model has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakSummary {
    pub intercept: Option<f64>,
    pub slope: f64,
}

/// One method's calibration output for one state.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub method: Method,
    pub state: usize,
    pub horizon: f64,
    /// (predicted, observed) pairs sorted by predicted value: per subject for
    /// PV/BLR/MLR, per risk group for AJ.
    pub points: Vec<(f64, f64)>,
    pub mean_calibration: f64,
    pub weak: Option<WeakSummary>,
}

/// Inclusion flags and one-hot occupancy at the horizon, decoupled from the
/// cohort so synthetic indicator sets can be calibrated directly.
#[derive(Debug, Clone)]
pub struct HorizonIndicators {
    pub included: Vec<bool>,
    pub matrix: Array2<f64>,
}

impl HorizonIndicators {
    pub fn from_cohort(cohort: &Cohort, t: f64) -> Self {
        let (included, matrix) = cohort.indicator_matrix(t);
        HorizonIndicators { included, matrix }
    }

    /// All subjects observed; `matrix` must be one-hot per row.
    pub fn fully_observed(matrix: Array2<f64>) -> Self {
        HorizonIndicators {
            included: vec![true; matrix.nrows()],
            matrix,
        }
    }

    pub fn n(&self) -> usize {
        self.included.len()
    }

    /// 1-indexed occupied state for an included subject.
    pub fn category(&self, i: usize) -> Option<usize> {
        if !self.included[i] {
            return None;
        }
        self.matrix
            .row(i)
            .iter()
            .position(|&v| v == 1.0)
            .map(|p| p + 1)
    }
}

/// Jackknife pseudo-values per subject and state, computed within risk
/// groups: `theta_i = m * theta - (m - 1) * theta_{-i}` with the
/// Aalen-Johansen estimator restricted to the subject's group.
#[derive(Debug, Clone)]
pub struct PseudoValueMatrix {
    pub horizon: f64,
    pub values: Array2<f64>,
    /// The grouping used per state (entry k-1 for state k).
    pub groupings: Vec<RiskGrouping>,
}

pub fn pseudo_values(
    cohort: &Cohort,
    preds: &PredictionMatrix,
    t: f64,
    n_groups: usize,
) -> Result<PseudoValueMatrix, CalibrationError> {
    let n = cohort.n();
    let k = cohort.structure().n_states();
    if preds.n() != n {
        return Err(CalibrationError::DimensionMismatch(format!(
            "{n} subjects but {} prediction rows",
            preds.n()
        )));
    }
    let ids = cohort.ids();
    let mut values = Array2::zeros((n, k));
    let mut groupings = Vec::with_capacity(k);
    for state in 1..=k {
        let grouping = make_risk_groups(preds, &ids, state, n_groups)?;
        let groups = grouping.groups();
        let per_group: Vec<Result<Vec<(usize, f64)>, CalibrationError>> = groups
            .par_iter()
            .enumerate()
            .map(|(g, members)| {
                let m = members.len();
                if m < 2 {
                    return Err(EstimatorError::GroupTooSmall {
                        state,
                        group: g,
                        size: m,
                        min: 2,
                    }
                    .into());
                }
                let full = aj_on_subset(cohort, members, t)?.probs[state - 1];
                let loo = aj_loo_on_subset(cohort, members, t)?;
                Ok(members
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| {
                        let pv = m as f64 * full - (m as f64 - 1.0) * loo[[r, state - 1]];
                        (i, pv)
                    })
                    .collect())
            })
            .collect();
        for group in per_group {
            for (i, pv) in group? {
                values[[i, state - 1]] = pv;
            }
        }
        groupings.push(grouping);
    }
    Ok(PseudoValueMatrix {
        horizon: t,
        values,
        groupings,
    })
}

fn sorted_points(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    let mut points: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points
}

/// Loess of the pseudo-values on the predicted probabilities with unit
/// weights. Fitted values are not clipped; pseudo-values legitimately leave
/// [0, 1].
pub fn pv_moderate(
    pv: &PseudoValueMatrix,
    preds: &PredictionMatrix,
    state: usize,
    span: f64,
) -> Result<CalibrationResult, CalibrationError> {
    let x: Vec<f64> = preds.state_column(state).to_vec();
    let y: Vec<f64> = pv.values.column(state - 1).to_vec();
    let w = vec![1.0; x.len()];
    let fit = loess(&x, &y, &w, span, 2)?;
    Ok(CalibrationResult {
        method: Method::Pv,
        state,
        horizon: pv.horizon,
        points: sorted_points(&x, &fit.fitted),
        mean_calibration: pv_mean(pv, preds, state),
        weak: Some(WeakSummary {
            intercept: None,
            slope: pv_weak(pv, preds, state),
        }),
    })
}

/// Average difference between pseudo-values and predictions.
pub fn pv_mean(pv: &PseudoValueMatrix, preds: &PredictionMatrix, state: usize) -> f64 {
    let n = preds.n() as f64;
    pv.values
        .column(state - 1)
        .iter()
        .zip(preds.state_column(state))
        .map(|(theta, p)| theta - p)
        .sum::<f64>()
        / n
}

/// No-intercept least-squares slope of the pseudo-values on the predictions.
pub fn pv_weak(pv: &PseudoValueMatrix, preds: &PredictionMatrix, state: usize) -> f64 {
    let mut num = 0.0;
    let mut denom = 0.0;
    for (theta, p) in pv
        .values
        .column(state - 1)
        .iter()
        .zip(preds.state_column(state))
    {
        num += theta * p;
        denom += p * p;
    }
    num / denom
}

/// Included subject indices with their weights; errors when an included
/// subject carries no weight.
fn included_with_weights(
    indicators: &HorizonIndicators,
    weights: &WeightVector,
) -> Result<(Vec<usize>, Vec<f64>), CalibrationError> {
    if weights.weights.len() != indicators.n() {
        return Err(CalibrationError::DimensionMismatch(format!(
            "{} indicator rows but {} weights",
            indicators.n(),
            weights.weights.len()
        )));
    }
    let mut idx = Vec::new();
    let mut w = Vec::new();
    for (i, &inc) in indicators.included.iter().enumerate() {
        if inc {
            match weights.weights[i] {
                Some(weight) => {
                    idx.push(i);
                    w.push(weight);
                }
                None => return Err(CalibrationError::MissingWeight(i)),
            }
        }
    }
    Ok((idx, w))
}

/// Weighted loess of the state indicator on the predicted probability;
/// fitted values are clipped to [0, 1].
pub fn blr_moderate(
    preds: &PredictionMatrix,
    indicators: &HorizonIndicators,
    weights: &WeightVector,
    state: usize,
    span: f64,
) -> Result<CalibrationResult, CalibrationError> {
    let (idx, w) = included_with_weights(indicators, weights)?;
    let x: Vec<f64> = idx.iter().map(|&i| preds.probs()[[i, state - 1]]).collect();
    let y: Vec<f64> = idx
        .iter()
        .map(|&i| indicators.matrix[[i, state - 1]])
        .collect();
    let fit = loess(&x, &y, &w, span, 2)?;
    let clipped: Vec<f64> = fit.fitted.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let weak = match blr_weak(preds, indicators, weights, state) {
        Ok((intercept, slope)) => Some(WeakSummary {
            intercept: Some(intercept),
            slope,
        }),
        Err(_) => None,
    };
    Ok(CalibrationResult {
        method: Method::Blr,
        state,
        horizon: preds.horizon,
        points: sorted_points(&x, &clipped),
        mean_calibration: blr_mean(preds, indicators, weights, state)?,
        weak,
    })
}

/// Intercept-only weighted logistic fit with offset `logit(p_hat)`; returns
/// the mean of `sigmoid(alpha + logit(p_hat)) - p_hat` over included
/// subjects.
pub fn blr_mean(
    preds: &PredictionMatrix,
    indicators: &HorizonIndicators,
    weights: &WeightVector,
    state: usize,
) -> Result<f64, CalibrationError> {
    let clamped = clamp_predictions(preds, DEFAULT_CLAMP_EPS);
    let (idx, w) = included_with_weights(indicators, weights)?;
    let m = idx.len();
    let y = Array1::from_iter(idx.iter().map(|&i| indicators.matrix[[i, state - 1]]));
    // Constant outcomes push the intercept to +-infinity; the fitted
    // probabilities converge to the outcome itself, so the probability-scale
    // mean calibration is still well defined.
    if y.iter().all(|&v| v == y[0]) {
        let mean = idx
            .iter()
            .map(|&i| y[0] - clamped.probs()[[i, state - 1]])
            .sum::<f64>()
            / m as f64;
        return Ok(mean);
    }
    let x = Array2::from_elem((m, 1), 1.0);
    let offset = Array1::from_iter(
        idx.iter()
            .map(|&i| logit(clamped.probs()[[i, state - 1]])),
    );
    let fit = weighted_logistic(&x, &y, &Array1::from_vec(w), &offset)?;
    let alpha = fit.coefficients[0];
    let mean = idx
        .iter()
        .map(|&i| {
            let p = clamped.probs()[[i, state - 1]];
            sigmoid(alpha + logit(p)) - p
        })
        .sum::<f64>()
        / m as f64;
    Ok(mean)
}

/// Free intercept and slope of the weighted logistic fit of the indicator on
/// `logit(p_hat)`.
pub fn blr_weak(
    preds: &PredictionMatrix,
    indicators: &HorizonIndicators,
    weights: &WeightVector,
    state: usize,
) -> Result<(f64, f64), CalibrationError> {
    let clamped = clamp_predictions(preds, DEFAULT_CLAMP_EPS);
    let (idx, w) = included_with_weights(indicators, weights)?;
    let m = idx.len();
    let mut x = Array2::zeros((m, 2));
    for (r, &i) in idx.iter().enumerate() {
        x[[r, 0]] = 1.0;
        x[[r, 1]] = logit(clamped.probs()[[i, state - 1]]);
    }
    let y = Array1::from_iter(idx.iter().map(|&i| indicators.matrix[[i, state - 1]]));
    let fit = weighted_logistic(&x, &y, &Array1::from_vec(w), &Array1::zeros(m))?;
    Ok((fit.coefficients[0], fit.coefficients[1]))
}

/// Log-ratio scores `LP_h = ln(p_h / p_1)` for the included subjects.
fn log_ratio_scores(clamped: &PredictionMatrix, idx: &[usize]) -> Vec<Vec<f64>> {
    let k = clamped.n_states();
    (2..=k)
        .map(|h| {
            idx.iter()
                .map(|&i| {
                    (clamped.probs()[[i, h - 1]] / clamped.probs()[[i, 0]]).ln()
                })
                .collect()
        })
        .collect()
}

/// Spline-expanded multinomial recalibration. Every equation contains the
/// natural-spline bases of all K-1 log-ratio scores; fitted category
/// probabilities are the observed values, which sum to 1 per subject.
pub fn mlr_moderate(
    preds: &PredictionMatrix,
    indicators: &HorizonIndicators,
    weights: &WeightVector,
    df: usize,
) -> Result<Vec<CalibrationResult>, CalibrationError> {
    let clamped = clamp_predictions(preds, DEFAULT_CLAMP_EPS);
    let (idx, w) = included_with_weights(indicators, weights)?;
    let m = idx.len();
    let k = preds.n_states();
    let scores = log_ratio_scores(&clamped, &idx);
    let mut design = Array2::zeros((m, 1 + (k - 1) * df));
    for r in 0..m {
        design[[r, 0]] = 1.0;
    }
    for (h, score) in scores.iter().enumerate() {
        let basis = crate::smoothers::natural_spline_basis(score, df)?;
        for r in 0..m {
            for c in 0..df {
                design[[r, 1 + h * df + c]] = basis.basis[[r, c]];
            }
        }
    }
    let designs = vec![design; k - 1];
    let offsets = vec![Array1::zeros(m); k - 1];
    let y: Vec<usize> = idx
        .iter()
        .map(|&i| indicators.category(i).expect("included subjects have a state"))
        .collect();
    let fit = weighted_multinomial(&designs, &y, &Array1::from_vec(w), &offsets)?;

    let means = mlr_mean(preds, indicators, weights)?;
    let weaks = mlr_weak(preds, indicators, weights)?;
    let mut results = Vec::with_capacity(k);
    for state in 1..=k {
        let x: Vec<f64> = idx.iter().map(|&i| preds.probs()[[i, state - 1]]).collect();
        let obs: Vec<f64> = (0..m).map(|r| fit.fitted[[r, state - 1]]).collect();
        results.push(CalibrationResult {
            method: Method::Mlr,
            state,
            horizon: preds.horizon,
            points: sorted_points(&x, &obs),
            mean_calibration: means[state - 1],
            weak: if state >= 2 {
                let (intercept, slope) = weaks[state - 2];
                Some(WeakSummary {
                    intercept: Some(intercept),
                    slope,
                })
            } else {
                None
            },
        });
    }
    Ok(results)
}

/// Intercept-only multinomial fit with offsets `LP_k`; the mean calibration
/// per state is the mean of `obs_k - p_hat_k` over included subjects
/// (state 1 through the softmax complement).
pub fn mlr_mean(
    preds: &PredictionMatrix,
    indicators: &HorizonIndicators,
    weights: &WeightVector,
) -> Result<Vec<f64>, CalibrationError> {
    let clamped = clamp_predictions(preds, DEFAULT_CLAMP_EPS);
    let (idx, w) = included_with_weights(indicators, weights)?;
    let m = idx.len();
    let k = preds.n_states();
    let scores = log_ratio_scores(&clamped, &idx);
    let designs = vec![Array2::from_elem((m, 1), 1.0); k - 1];
    let offsets: Vec<Array1<f64>> = scores
        .iter()
        .map(|s| Array1::from_vec(s.clone()))
        .collect();
    let y: Vec<usize> = idx
        .iter()
        .map(|&i| indicators.category(i).expect("included subjects have a state"))
        .collect();
    let fit = weighted_multinomial(&designs, &y, &Array1::from_vec(w), &offsets)?;
    let mut means = vec![0.0; k];
    for (r, &i) in idx.iter().enumerate() {
        for state in 1..=k {
            means[state - 1] += fit.fitted[[r, state - 1]] - clamped.probs()[[i, state - 1]];
        }
    }
    for mean in &mut means {
        *mean /= m as f64;
    }
    Ok(means)
}

/// Free intercepts and slopes per equation of the multinomial fit on the
/// log-ratio scores.
pub fn mlr_weak(
    preds: &PredictionMatrix,
    indicators: &HorizonIndicators,
    weights: &WeightVector,
) -> Result<Vec<(f64, f64)>, CalibrationError> {
    let clamped = clamp_predictions(preds, DEFAULT_CLAMP_EPS);
    let (idx, w) = included_with_weights(indicators, weights)?;
    let m = idx.len();
    let k = preds.n_states();
    let scores = log_ratio_scores(&clamped, &idx);
    let designs: Vec<Array2<f64>> = scores
        .iter()
        .map(|s| {
            let mut d = Array2::zeros((m, 2));
            for (r, &v) in s.iter().enumerate() {
                d[[r, 0]] = 1.0;
                d[[r, 1]] = v;
            }
            d
        })
        .collect();
    let offsets = vec![Array1::zeros(m); k - 1];
    let y: Vec<usize> = idx
        .iter()
        .map(|&i| indicators.category(i).expect("included subjects have a state"))
        .collect();
    let fit = weighted_multinomial(&designs, &y, &Array1::from_vec(w), &offsets)?;
    Ok(fit
        .coefficients
        .iter()
        .map(|beta| (beta[0], beta[1]))
        .collect())
}

/// How weights are derived, so bootstrap replicates can refit them.
#[derive(Debug, Clone)]
pub enum WeightSource {
    /// Cox censoring model on all baseline covariates.
    Estimated,
    /// Covariate-free censoring model (Nelson-Aalen baseline).
    Misspecified,
    /// Analytic weights from the data-generating mechanism.
    True(Box<DgmConfig>),
    /// All included subjects weighted 1.
    Unit,
}

pub fn weights_from_source(
    source: &WeightSource,
    cohort: &Cohort,
    t: f64,
    cap: f64,
) -> Result<WeightVector, CalibrationError> {
    Ok(match source {
        WeightSource::Estimated => ipcw::estimated_weights(cohort, t, cap)?,
        WeightSource::Misspecified => ipcw::misspecified_weights(cohort, t, cap)?,
        WeightSource::True(config) => ipcw::true_weights(cohort, config, t, cap),
        WeightSource::Unit => WeightVector::unit(cohort, t),
    })
}

/// Everything needed to recompute one method's mean calibration from scratch
/// on a resampled cohort.
#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub method: Method,
    pub groups: usize,
    pub span: f64,
    pub df: usize,
    pub weight_source: WeightSource,
    pub cap: f64,
}

impl MethodSpec {
    pub fn new(method: Method, weight_source: WeightSource) -> Self {
        MethodSpec {
            method,
            groups: 20,
            span: 0.75,
            df: 4,
            weight_source,
            cap: f64::INFINITY,
        }
    }
}

/// Mean calibration per state for one method, deriving weights from the
/// spec's source.
pub fn mean_calibration_vector(
    spec: &MethodSpec,
    cohort: &Cohort,
    preds: &PredictionMatrix,
) -> Result<Vec<f64>, CalibrationError> {
    let t = preds.horizon;
    let k = cohort.structure().n_states();
    match spec.method {
        Method::Aj => (1..=k)
            .map(|state| Ok(aj_mean_calibration(cohort, preds, state, spec.groups)?))
            .collect(),
        Method::Pv => {
            let pv = pseudo_values(cohort, preds, t, spec.groups)?;
            Ok((1..=k).map(|state| pv_mean(&pv, preds, state)).collect())
        }
        Method::Blr => {
            let weights = weights_from_source(&spec.weight_source, cohort, t, spec.cap)?;
            let indicators = HorizonIndicators::from_cohort(cohort, t);
            (1..=k)
                .map(|state| blr_mean(preds, &indicators, &weights, state))
                .collect()
        }
        Method::Mlr => {
            let weights = weights_from_source(&spec.weight_source, cohort, t, spec.cap)?;
            let indicators = HorizonIndicators::from_cohort(cohort, t);
            mlr_mean(preds, &indicators, &weights)
        }
    }
}

/// Moderate-calibration results for one method across all states.
pub fn moderate_results(
    spec: &MethodSpec,
    cohort: &Cohort,
    preds: &PredictionMatrix,
) -> Result<Vec<CalibrationResult>, CalibrationError> {
    let t = preds.horizon;
    let k = cohort.structure().n_states();
    match spec.method {
        Method::Aj => (1..=k)
            .map(|state| {
                let points = aj_moderate_points(cohort, preds, state, spec.groups)?;
                Ok(CalibrationResult {
                    method: Method::Aj,
                    state,
                    horizon: t,
                    points,
                    mean_calibration: aj_mean_calibration(cohort, preds, state, spec.groups)?,
                    weak: None,
                })
            })
            .collect(),
        Method::Pv => {
            let pv = pseudo_values(cohort, preds, t, spec.groups)?;
            (1..=k)
                .map(|state| pv_moderate(&pv, preds, state, spec.span))
                .collect()
        }
        Method::Blr => {
            let weights = weights_from_source(&spec.weight_source, cohort, t, spec.cap)?;
            let indicators = HorizonIndicators::from_cohort(cohort, t);
            (1..=k)
                .map(|state| blr_moderate(preds, &indicators, &weights, state, spec.span))
                .collect()
        }
        Method::Mlr => {
            let weights = weights_from_source(&spec.weight_source, cohort, t, spec.cap)?;
            let indicators = HorizonIndicators::from_cohort(cohort, t);
            mlr_moderate(preds, &indicators, &weights, spec.df)
        }
    }
}

/// Bootstrap standard errors of the per-state mean calibration. Subjects are
/// resampled with replacement, predictions travel with them, and weights and
/// models are refitted per replicate. Deterministic given `seed`; replicates
/// run in parallel with per-replicate RNG streams.
pub fn bootstrap_se(
    spec: &MethodSpec,
    cohort: &Cohort,
    preds: &PredictionMatrix,
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>, CalibrationError> {
    let spec = spec.clone();
    let (ses, _failures) = bootstrap_se_of(
        move |cohort, preds| mean_calibration_vector(&spec, cohort, preds),
        cohort,
        preds,
        replicates,
        seed,
    )?;
    Ok(ses)
}

/// Generic bootstrap over any per-cohort statistic vector. Returns the
/// standard errors and the number of failed replicates; errors out unless at
/// least 90% of replicates succeed.
pub fn bootstrap_se_of<F>(
    statistic: F,
    cohort: &Cohort,
    preds: &PredictionMatrix,
    replicates: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize), CalibrationError>
where
    F: Fn(&Cohort, &PredictionMatrix) -> Result<Vec<f64>, CalibrationError> + Sync,
{
    if replicates < 50 {
        return Err(CalibrationError::TooFewReplicates(replicates));
    }
    let n = cohort.n();
    let draws: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha12Rng::seed_from_u64(dgm::mix(seed, 0xb002, r as u64));
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let subjects = indices
                .iter()
                .enumerate()
                .map(|(new_id, &i)| {
                    let mut s = cohort.subjects()[i].clone();
                    s.id = new_id as u64;
                    s
                })
                .collect();
            let resampled = Cohort::new(cohort.structure().clone(), subjects).ok()?;
            let mut probs = Array2::zeros((n, preds.n_states()));
            for (row, &i) in indices.iter().enumerate() {
                for c in 0..preds.n_states() {
                    probs[[row, c]] = preds.probs()[[i, c]];
                }
            }
            let mut resampled_preds =
                PredictionMatrix::new(preds.horizon, probs, false).ok()?;
            resampled_preds.row_normalized = preds.row_normalized;
            resampled_preds.clamped = preds.clamped;
            statistic(&resampled, &resampled_preds).ok()
        })
        .collect();

    let successes: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let failures = replicates - successes.len();
    if successes.len() < (replicates as f64 * 0.9).ceil() as usize {
        return Err(CalibrationError::BootstrapUnstable {
            successes: successes.len(),
            total: replicates,
        });
    }
    let dims = successes[0].len();
    let mut ses = Vec::with_capacity(dims);
    for d in 0..dims {
        let vals: Vec<f64> = successes.iter().map(|v| v[d]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (vals.len() as f64 - 1.0);
        ses.push(var.sqrt());
    }
    Ok((ses, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aalen_johansen::aalen_johansen;
    use crate::dgm::{simulate_cohort, simulate_with_config, Scenario, HORIZON_DAYS};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_preds(cohort: &Cohort, seed: u64) -> PredictionMatrix {
        let k = cohort.structure().n_states();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut probs = Array2::zeros((cohort.n(), k));
        for i in 0..cohort.n() {
            let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for (c, v) in row.iter_mut().enumerate() {
                probs[[i, c]] = *v / sum;
            }
        }
        PredictionMatrix::new(HORIZON_DAYS, probs, true).unwrap()
    }

    #[test]
    fn uncensored_pseudo_values_collapse_to_indicators() {
        let config = DgmConfig::dgm1().without_censoring();
        let cohort = simulate_with_config(&config, 120, 31).unwrap();
        let preds = random_preds(&cohort, 1);
        for groups in [1, 4] {
            let pv = pseudo_values(&cohort, &preds, HORIZON_DAYS, groups).unwrap();
            let (_, indicators) = cohort.indicator_matrix(HORIZON_DAYS);
            for i in 0..cohort.n() {
                for c in 0..5 {
                    assert_abs_diff_eq!(
                        pv.values[[i, c]],
                        indicators[[i, c]],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn pseudo_value_mean_tracks_full_cohort_estimate() {
        let cohort = simulate_cohort(&DgmConfig::dgm1(), Scenario::Nic, 1000, 8).unwrap();
        let preds = random_preds(&cohort, 2);
        let pv = pseudo_values(&cohort, &preds, HORIZON_DAYS, 1).unwrap();
        let aj = aalen_johansen(&cohort, HORIZON_DAYS).unwrap();
        for state in 1..=5 {
            let mean_pv = pv.values.column(state - 1).mean().unwrap();
            assert_abs_diff_eq!(mean_pv, aj.probs[state - 1], epsilon = 0.02);
        }
    }

    #[test]
    fn group_too_small_is_rejected() {
        let config = DgmConfig::dgm1().without_censoring();
        let cohort = simulate_with_config(&config, 5, 3).unwrap();
        let preds = random_preds(&cohort, 3);
        let err = pseudo_values(&cohort, &preds, HORIZON_DAYS, 5).unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::Estimator(EstimatorError::GroupTooSmall { .. })
        ));
    }

    #[test]
    fn pv_mean_and_weak_closed_forms() {
        // theta == p gives (0, 1); theta == 2p gives slope 2 exactly.
        let preds = PredictionMatrix::new(
            1.0,
            array![[0.8, 0.2], [0.6, 0.4], [0.4, 0.6], [0.1, 0.9]],
            true,
        )
        .unwrap();
        let identity = PseudoValueMatrix {
            horizon: 1.0,
            values: preds.probs().clone(),
            groupings: vec![],
        };
        assert_abs_diff_eq!(pv_mean(&identity, &preds, 2), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pv_weak(&identity, &preds, 2), 1.0, epsilon = 1e-15);

        let doubled = PseudoValueMatrix {
            horizon: 1.0,
            values: preds.probs().mapv(|v| 2.0 * v),
            groupings: vec![],
        };
        assert_abs_diff_eq!(pv_weak(&doubled, &preds, 2), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn uncensored_pv_and_blr_moderate_agree() {
        let config = DgmConfig::dgm1().without_censoring();
        let cohort = simulate_with_config(&config, 150, 12).unwrap();
        let preds = random_preds(&cohort, 4);
        let pv = pseudo_values(&cohort, &preds, HORIZON_DAYS, 1).unwrap();
        let indicators = HorizonIndicators::from_cohort(&cohort, HORIZON_DAYS);
        let weights = WeightVector::unit(&cohort, HORIZON_DAYS);
        for state in 1..=5 {
            let pv_curve = pv_moderate(&pv, &preds, state, 0.75).unwrap();
            let blr_curve = blr_moderate(&preds, &indicators, &weights, state, 0.75).unwrap();
            assert_eq!(pv_curve.points.len(), blr_curve.points.len());
            for (a, b) in pv_curve.points.iter().zip(&blr_curve.points) {
                assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-12);
                // BLR clips to [0, 1]; indicators make the raw fits equal.
                assert_abs_diff_eq!(a.1.clamp(0.0, 1.0), b.1, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn blr_moderate_flat_and_weight_scale_invariance() {
        let n = 60;
        let mut probs = Array2::zeros((n, 2));
        for i in 0..n {
            let p = 0.1 + 0.8 * i as f64 / n as f64;
            probs[[i, 0]] = 1.0 - p;
            probs[[i, 1]] = p;
        }
        let preds = PredictionMatrix::new(10.0, probs, true).unwrap();
        let indicators = HorizonIndicators::fully_observed({
            let mut m = Array2::zeros((n, 2));
            for i in 0..n {
                m[[i, 0]] = 1.0;
            }
            m
        });
        let unit = WeightVector {
            weights: vec![Some(1.0); n],
            cap: f64::INFINITY,
            zero_survival_count: 0,
        };
        // Indicators all zero for state 2: the curve is identically 0.
        let curve = blr_moderate(&preds, &indicators, &unit, 2, 0.75).unwrap();
        assert!(curve.points.iter().all(|&(_, obs)| obs == 0.0));

        // Doubling the weights leaves the curve unchanged.
        let doubled = WeightVector {
            weights: vec![Some(2.0); n],
            cap: f64::INFINITY,
            zero_survival_count: 0,
        };
        let mut mixed = Array2::zeros((n, 2));
        for i in 0..n {
            mixed[[i, usize::from(i % 3 == 0)]] = 1.0;
        }
        let indicators = HorizonIndicators::fully_observed(mixed);
        let a = blr_moderate(&preds, &indicators, &unit, 2, 0.75).unwrap();
        let b = blr_moderate(&preds, &indicators, &doubled, 2, 0.75).unwrap();
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert_abs_diff_eq!(pa.1, pb.1, epsilon = 1e-10);
        }
    }

    #[test]
    fn blr_mean_zero_when_observed_matches_predictions() {
        let n = 40;
        let probs = Array2::from_shape_fn((n, 2), |(_, c)| if c == 1 { 0.5 } else { 0.5 });
        let preds = PredictionMatrix::new(5.0, probs, true).unwrap();
        let mut m = Array2::zeros((n, 2));
        for i in 0..n {
            m[[i, usize::from(i % 2 == 0)]] = 1.0;
        }
        let indicators = HorizonIndicators::fully_observed(m);
        let unit = WeightVector {
            weights: vec![Some(1.0); n],
            cap: f64::INFINITY,
            zero_survival_count: 0,
        };
        let mean = blr_mean(&preds, &indicators, &unit, 2).unwrap();
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
    }

    fn bernoulli_indicators(preds: &PredictionMatrix, state: usize, seed: u64) -> HorizonIndicators {
        let n = preds.n();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = Array2::zeros((n, preds.n_states()));
        for i in 0..n {
            let p = preds.probs()[[i, state - 1]];
            if rng.random::<f64>() < p {
                m[[i, state - 1]] = 1.0;
            } else {
                let other = if state == 1 { 2 } else { 1 };
                m[[i, other - 1]] = 1.0;
            }
        }
        HorizonIndicators::fully_observed(m)
    }

    #[test]
    fn blr_weak_recovers_unit_slope_and_shrunk_slope() {
        let n = 20_000;
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let mut probs = Array2::zeros((n, 2));
        for i in 0..n {
            let p: f64 = rng.random_range(0.05..0.95);
            probs[[i, 0]] = 1.0 - p;
            probs[[i, 1]] = p;
        }
        let preds = PredictionMatrix::new(7.0, probs, true).unwrap();
        let unit = WeightVector {
            weights: vec![Some(1.0); n],
            cap: f64::INFINITY,
            zero_survival_count: 0,
        };
        let indicators = bernoulli_indicators(&preds, 2, 91);
        let (_, slope) = blr_weak(&preds, &indicators, &unit, 2).unwrap();
        assert_abs_diff_eq!(slope, 1.0, epsilon = 0.05);

        // Predictions with doubled logits: the recovery slope is 1/2.
        let stretched = preds.probs().mapv(|p| sigmoid(2.0 * logit(p)));
        let mut stretched = PredictionMatrix::new(7.0, stretched, false).unwrap();
        stretched.row_normalized = false;
        let (_, slope) = blr_weak(&stretched, &indicators, &unit, 2).unwrap();
        assert_abs_diff_eq!(slope, 0.5, epsilon = 0.05);
    }

    #[test]
    fn blr_weak_constant_predictions_are_singular() {
        let n = 50;
        let probs = Array2::from_elem((n, 2), 0.5);
        let preds = PredictionMatrix::new(2.0, probs, true).unwrap();
        let indicators = bernoulli_indicators(&preds, 2, 3);
        let unit = WeightVector {
            weights: vec![Some(1.0); n],
            cap: f64::INFINITY,
            zero_survival_count: 0,
        };
        let err = blr_weak(&preds, &indicators, &unit, 2).unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::Smoother(SmootherError::FitSingular)
        ));
    }

    #[test]
    fn mlr_observed_rows_sum_to_one() {
        // Needs enough included subjects to support the 68-parameter
        // spline-expanded design.
        let cohort = simulate_cohort(&DgmConfig::dgm1(), Scenario::Nic, 2500, 6).unwrap();
        let preds = random_preds(&cohort, 9);
        let indicators = HorizonIndicators::from_cohort(&cohort, HORIZON_DAYS);
        let weights = WeightVector::unit(&cohort, HORIZON_DAYS);
        let results = mlr_moderate(&preds, &indicators, &weights, 4).unwrap();
        let m = results[0].points.len();
        // Re-associate per-subject observed values via index: sum across the
        // per-state sorted lists is not meaningful, so check through mlr_mean
        // identity instead: sum_k mean_k = 0 for row-normalized predictions.
        let means = mlr_mean(&preds, &indicators, &weights).unwrap();
        let total: f64 = means.iter().sum();
        assert_abs_diff_eq!(total, 0.0, epsilon = 1e-9);
        assert!(m > 0);
        for result in &results {
            assert!(result.points.iter().all(|&(_, obs)| (0.0..=1.0).contains(&obs)));
        }
    }

    #[test]
    fn binary_mlr_matches_blr() {
        let n = 5000;
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let mut probs = Array2::zeros((n, 2));
        for i in 0..n {
            let p: f64 = rng.random_range(0.1..0.9);
            probs[[i, 0]] = 1.0 - p;
            probs[[i, 1]] = p;
        }
        let preds = PredictionMatrix::new(3.0, probs, true).unwrap();
        let indicators = bernoulli_indicators(&preds, 2, 13);
        let weights = WeightVector {
            weights: (0..n).map(|i| Some(1.0 + (i % 5) as f64 / 4.0)).collect(),
            cap: f64::INFINITY,
            zero_survival_count: 0,
        };
        let blr = blr_mean(&preds, &indicators, &weights, 2).unwrap();
        let mlr = mlr_mean(&preds, &indicators, &weights).unwrap();
        assert_abs_diff_eq!(mlr[1], blr, epsilon = 1e-8);
        assert_abs_diff_eq!(mlr[0], -blr, epsilon = 1e-8);

        let (blr_int, blr_slope) = blr_weak(&preds, &indicators, &weights, 2).unwrap();
        let mlr_ws = mlr_weak(&preds, &indicators, &weights).unwrap();
        assert_abs_diff_eq!(mlr_ws[0].0, blr_int, epsilon = 1e-8);
        assert_abs_diff_eq!(mlr_ws[0].1, blr_slope, epsilon = 1e-8);
    }

    #[test]
    fn log_ratio_scores_match_closed_form() {
        let preds = PredictionMatrix::new(1.0, array![[0.7, 0.2, 0.1]], true).unwrap();
        let clamped = clamp_predictions(&preds, DEFAULT_CLAMP_EPS);
        let scores = log_ratio_scores(&clamped, &[0]);
        assert_abs_diff_eq!(scores[0][0], -1.2527629684953678, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[1][0], -1.9459101490553132, epsilon = 1e-12);
    }

    #[test]
    fn bootstrap_zero_variance_statistic_has_zero_se() {
        let config = DgmConfig::dgm1();
        let cohort = simulate_cohort(&config, Scenario::Nic, 100, 15).unwrap();
        let preds = random_preds(&cohort, 15);
        let (ses, failures) = bootstrap_se_of(
            |_, _| Ok(vec![0.25]),
            &cohort,
            &preds,
            60,
            1,
        )
        .unwrap();
        assert_eq!(failures, 0);
        assert_eq!(ses, vec![0.0]);
    }

    #[test]
    fn bootstrap_se_matches_sampling_theory_for_a_mean() {
        // Statistic: mean of the first covariate. Bootstrap SE should match
        // sigma / sqrt(n) within 15% at 500 replicates.
        let config = DgmConfig::dgm1();
        let cohort = simulate_cohort(&config, Scenario::Nic, 400, 21).unwrap();
        let preds = random_preds(&cohort, 22);
        let n = cohort.n() as f64;
        let values: Vec<f64> = cohort.subjects().iter().map(|s| s.covariates[0]).collect();
        let mean = values.iter().sum::<f64>() / n;
        let sigma = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let expected = sigma / n.sqrt();

        let (ses, _) = bootstrap_se_of(
            |resampled, _| {
                Ok(vec![resampled
                    .subjects()
                    .iter()
                    .map(|s| s.covariates[0])
                    .sum::<f64>()
                    / resampled.n() as f64])
            },
            &cohort,
            &preds,
            500,
            33,
        )
        .unwrap();
        assert!(
            (ses[0] - expected).abs() / expected < 0.15,
            "bootstrap SE {} vs theory {}",
            ses[0],
            expected
        );
    }

    #[test]
    fn bootstrap_is_deterministic_and_rejects_small_b() {
        let config = DgmConfig::dgm1();
        let cohort = simulate_cohort(&config, Scenario::Nic, 200, 2).unwrap();
        let preds = random_preds(&cohort, 5);
        let spec = MethodSpec::new(Method::Aj, WeightSource::Unit);
        let a = bootstrap_se(&spec, &cohort, &preds, 50, 9).unwrap();
        let b = bootstrap_se(&spec, &cohort, &preds, 50, 9).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            bootstrap_se(&spec, &cohort, &preds, 10, 9),
            Err(CalibrationError::TooFewReplicates(10))
        ));
    }
}
