//! Exact transition probabilities out of state 1 for a progressive
//! exponential-hazard mechanism, plus the simulation estimands.
//!
//! `P_jj(u, t) = S_j(t) / S_j(u)` and, for `k != j`,
//! `P_jk(u, t) = sum_m integral_u^t q_jm exp(-R_j (r - u)) P_mk(r, t) dr`
//! summed over the direct successors `m` of `j` that can still reach `k`.
//! The recursion walks backward from the absorbing states, integrating each
//! branch with adaptive 15-point Gauss-Kronrod panels; inner probabilities
//! are memoized per evaluation point so repeated nodes across panels and
//! targets are free.

use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::PredictionMatrix;
use crate::dgm::DgmConfig;

/// Absolute tolerance of the returned probabilities.
pub const QUADRATURE_TOL: f64 = 1e-6;
/// Per-integral budget; branches and nesting stay an order below the target.
const PANEL_TOL: f64 = 1e-9;
const MAX_BISECTIONS: usize = 24;

#[derive(Debug, Error)]
pub enum TruthError {
    #[error("quadrature did not reach tolerance {tol:.1e} after {max} bisections (interval [{a}, {b}])")]
    ToleranceNotMet {
        tol: f64,
        max: usize,
        a: f64,
        b: f64,
    },
    #[error("state {0} is not reachable from state 1")]
    Unreachable(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// True per-subject transition probabilities at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueProbs {
    pub horizon: f64,
    pub probs: Array2<f64>,
}

impl TrueProbs {
    pub fn to_prediction_matrix(&self) -> PredictionMatrix {
        PredictionMatrix::new(self.horizon, self.probs.clone(), true)
            .expect("quadrature rows are normalized")
    }
}

/// The simulation estimand: per-state (predicted, true) point sets and the
/// mean difference `sum(p_k - p_hat_k) / n`.
#[derive(Debug, Clone)]
pub struct Estimand {
    /// Per state, (predicted, true) points sorted by predicted value.
    pub points: Vec<Vec<(f64, f64)>>,
    pub mean: Vec<f64>,
}

/// `S_j(t | z) = exp(-t exp(beta . z) sum_k 1/lambda_{j,k})`; 1 when `j` is
/// absorbing.
pub fn state_survival(config: &DgmConfig, z: &[f64], state: usize, t: f64) -> f64 {
    if config.structure.is_absorbing(state) {
        return 1.0;
    }
    let risk: f64 = config
        .beta_trans
        .iter()
        .zip(z)
        .map(|(b, v)| b * v)
        .sum::<f64>()
        .exp();
    let total_rate: f64 = config
        .structure
        .targets_from(state)
        .map(|k| 1.0 / config.scale(state, k))
        .sum();
    (-t * risk * total_rate).exp()
}

struct Engine<'a> {
    config: &'a DgmConfig,
    /// Outgoing (target, rate) pairs per 1-indexed state.
    out: Vec<Vec<(usize, f64)>>,
    total_rate: Vec<f64>,
    horizon: f64,
    cache: HashMap<(usize, usize, u64), f64>,
}

impl<'a> Engine<'a> {
    fn new(config: &'a DgmConfig, z: &[f64], horizon: f64) -> Self {
        let risk: f64 = config
            .beta_trans
            .iter()
            .zip(z)
            .map(|(b, v)| b * v)
            .sum::<f64>()
            .exp();
        let k = config.structure.n_states();
        let mut out = vec![Vec::new(); k + 1];
        let mut total_rate = vec![0.0; k + 1];
        for ((from, to), scale) in config.scales() {
            let rate = risk / scale;
            out[from].push((to, rate));
            total_rate[from] += rate;
        }
        Engine {
            config,
            out,
            total_rate,
            horizon,
            cache: HashMap::new(),
        }
    }

    /// `P_{jk}(u, horizon)`.
    fn prob(&mut self, from: usize, target: usize, u: f64) -> Result<f64, TruthError> {
        let structure = &self.config.structure;
        if !structure.reaches(from, target) {
            return Ok(0.0);
        }
        if structure.is_absorbing(from) {
            return Ok(if from == target { 1.0 } else { 0.0 });
        }
        let key = (from, target, u.to_bits());
        if let Some(&hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let mut value = if from == target {
            (-self.total_rate[from] * (self.horizon - u)).exp()
        } else {
            0.0
        };
        for branch in 0..self.out[from].len() {
            let (mid, rate) = self.out[from][branch];
            if !structure.reaches(mid, target) {
                continue;
            }
            value += self.integrate_branch(
                from,
                mid,
                target,
                rate,
                u,
                u,
                self.horizon,
                PANEL_TOL,
                MAX_BISECTIONS,
            )?;
        }
        self.cache.insert(key, value);
        Ok(value)
    }

    /// Adaptive integral of `rate * exp(-R_from (r - origin)) *
    /// P_{mid,target}(r)` over `[a, b]`, bisecting until the Gauss-Kronrod
    /// error estimate is within `tol`. `origin` stays fixed across
    /// bisections.
    #[allow(clippy::too_many_arguments)]
    fn integrate_branch(
        &mut self,
        from: usize,
        mid: usize,
        target: usize,
        rate: f64,
        origin: f64,
        a: f64,
        b: f64,
        tol: f64,
        depth: usize,
    ) -> Result<f64, TruthError> {
        let (kronrod, gauss) = self.gk15(from, mid, target, rate, origin, a, b)?;
        let err = (kronrod - gauss).abs();
        if err <= tol || (b - a) < 1e-12 * self.horizon.max(1.0) {
            return Ok(kronrod);
        }
        if depth == 0 {
            return Err(TruthError::ToleranceNotMet {
                tol,
                max: MAX_BISECTIONS,
                a,
                b,
            });
        }
        let midpoint = 0.5 * (a + b);
        Ok(self
            .integrate_branch(from, mid, target, rate, origin, a, midpoint, tol / 2.0, depth - 1)?
            + self.integrate_branch(
                from,
                mid,
                target,
                rate,
                origin,
                midpoint,
                b,
                tol / 2.0,
                depth - 1,
            )?)
    }

    #[allow(clippy::too_many_arguments)]
    fn gk15(
        &mut self,
        from: usize,
        mid: usize,
        target: usize,
        rate: f64,
        origin: f64,
        a: f64,
        b: f64,
    ) -> Result<(f64, f64), TruthError> {
        let center = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut kronrod = 0.0;
        let mut gauss = 0.0;
        for (node_idx, &x) in GK_NODES.iter().enumerate() {
            for sign in [-1.0, 1.0] {
                let r = center + sign * half * x;
                let inner = self.prob(mid, target, r)?;
                let f = rate * (-self.total_rate[from] * (r - origin)).exp() * inner;
                kronrod += GK_WEIGHTS[node_idx] * f;
                if node_idx % 2 == 1 {
                    gauss += GAUSS_WEIGHTS[node_idx / 2] * f;
                }
                // The central node appears once.
                if x == 0.0 {
                    break;
                }
            }
        }
        Ok((kronrod * half, gauss * half))
    }
}

// 15-point Kronrod extension of 7-point Gauss-Legendre (QUADPACK dqk15).
const GK_NODES: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

/// `P_{1,target}(0, t | z)` to absolute tolerance [`QUADRATURE_TOL`].
pub fn true_transition_prob(
    config: &DgmConfig,
    z: &[f64],
    target: usize,
    t: f64,
) -> Result<f64, TruthError> {
    if !config.structure.reaches(1, target) {
        return Err(TruthError::Unreachable(target));
    }
    let mut engine = Engine::new(config, z, t);
    engine.prob(1, target, 0.0)
}

/// Full probability vector for one covariate vector.
pub fn true_prob_vector(config: &DgmConfig, z: &[f64], t: f64) -> Result<Vec<f64>, TruthError> {
    let mut engine = Engine::new(config, z, t);
    (1..=config.structure.n_states())
        .map(|k| engine.prob(1, k, 0.0))
        .collect()
}

/// Per-subject probabilities, parallel over rows of `z`.
pub fn true_probs(config: &DgmConfig, z: &Array2<f64>, t: f64) -> Result<TrueProbs, TruthError> {
    let n = z.nrows();
    let k = config.structure.n_states();
    if z.ncols() != config.beta_trans.len() {
        return Err(TruthError::DimensionMismatch(format!(
            "z has {} columns, beta_trans has {}",
            z.ncols(),
            config.beta_trans.len()
        )));
    }
    let rows: Vec<Result<Vec<f64>, TruthError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi: Vec<f64> = z.row(i).to_vec();
            true_prob_vector(config, &zi, t)
        })
        .collect();
    let mut probs = Array2::zeros((n, k));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row?.into_iter().enumerate() {
            probs[[i, j]] = v.clamp(0.0, 1.0);
        }
    }
    Ok(TrueProbs { horizon: t, probs })
}

/// Pair predictions with truths into the estimand.
pub fn compute_estimand(
    preds: &PredictionMatrix,
    truths: &TrueProbs,
) -> Result<Estimand, TruthError> {
    if preds.n() != truths.probs.nrows() || preds.n_states() != truths.probs.ncols() {
        return Err(TruthError::DimensionMismatch(format!(
            "predictions are {}x{}, truths are {}x{}",
            preds.n(),
            preds.n_states(),
            truths.probs.nrows(),
            truths.probs.ncols()
        )));
    }
    let n = preds.n();
    let k = preds.n_states();
    let mut points = Vec::with_capacity(k);
    let mut mean = Vec::with_capacity(k);
    for state in 1..=k {
        let mut state_points: Vec<(f64, f64)> = (0..n)
            .map(|i| (preds.probs()[[i, state - 1]], truths.probs[[i, state - 1]]))
            .collect();
        state_points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let m = state_points.iter().map(|&(p, tr)| tr - p).sum::<f64>() / n as f64;
        points.push(state_points);
        mean.push(m);
    }
    Ok(Estimand { points, mean })
}

/// Single-valued reference curve `p_hat -> p` built from the estimand points
/// by monotone (piecewise linear) interpolation; duplicate abscissae are
/// averaged.
#[derive(Debug, Clone)]
pub struct ReferenceCurve {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl ReferenceCurve {
    pub fn from_estimand(estimand: &Estimand, state: usize) -> Self {
        let points = &estimand.points[state - 1];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut i = 0;
        while i < points.len() {
            let x = points[i].0;
            let mut sum = 0.0;
            let mut count = 0;
            while i < points.len() && points[i].0 == x {
                sum += points[i].1;
                count += 1;
                i += 1;
            }
            xs.push(x);
            ys.push(sum / count as f64);
        }
        ReferenceCurve { xs, ys }
    }

    /// Interpolated value and whether the query fell outside the observed
    /// range (clipped to the boundary value).
    pub fn eval(&self, query: f64) -> (f64, bool) {
        let n = self.xs.len();
        if n == 0 {
            return (f64::NAN, true);
        }
        if query <= self.xs[0] {
            return (self.ys[0], query < self.xs[0]);
        }
        if query >= self.xs[n - 1] {
            return (self.ys[n - 1], query > self.xs[n - 1]);
        }
        let hi = self.xs.partition_point(|&x| x < query);
        let (x0, x1) = (self.xs[hi - 1], self.xs[hi]);
        let (y0, y1) = (self.ys[hi - 1], self.ys[hi]);
        if x1 == x0 {
            return (y0, false);
        }
        let w = (query - x0) / (x1 - x0);
        (y0 + w * (y1 - y0), false)
    }
}

/// Evaluate the true reference curve at the query abscissae. The second
/// element flags extrapolation (values clipped at the range boundary).
pub fn true_curve_reference(
    estimand: &Estimand,
    state: usize,
    queries: &[f64],
) -> (Vec<f64>, bool) {
    let curve = ReferenceCurve::from_estimand(estimand, state);
    let mut clipped = false;
    let values = queries
        .iter()
        .map(|&q| {
            let (v, c) = curve.eval(q);
            clipped |= c;
            v
        })
        .collect();
    (values, clipped)
}
