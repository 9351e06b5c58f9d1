//! Cohort simulation from competing exponential cause-specific hazards with
//! covariate effects, the three censoring scenarios, deterministic
//! miscalibration transforms, and superpopulation subsampling.
//!
//! Transition `j -> k` fires after an exponential time with hazard
//! `exp(beta_trans . z) / scale_{j,k}`; the scales are mean waiting times in
//! days. Censoring draws a single exponential time with hazard
//! `exp(beta_cens . z) / lambda_cens` and truncates the observed history.
//! Every subject owns one RNG stream keyed by its index, so cohorts are
//! reproducible under parallel generation and event histories are identical
//! across censoring scenarios run with the same seed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cohort, DataError, PredictionMatrix, SubjectHistory, TransitionStructure};
use crate::linalg::{logit, sigmoid};

/// Evaluation horizon in days: the 7-year point implied by the baseline
/// scales (`ln(1/0.9) * 24267 ~ 2557`).
pub const HORIZON_DAYS: f64 = 2557.0;

/// Baseline mean waiting time for censoring: 0.4 censoring probability over
/// the horizon at z = 0.
pub const LAMBDA_CENS: f64 = 5005.0;

#[derive(Debug, Error)]
pub enum DgmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Censoring scenario presets: non-, weakly, and strongly informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Nic,
    Wic,
    Sic,
}

impl Scenario {
    pub fn beta_cens(self) -> [f64; 2] {
        match self {
            Scenario::Nic => [0.0, 0.0],
            Scenario::Wic => [0.25, -0.25],
            Scenario::Sic => [1.0, -1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Nic => "nic",
            Scenario::Wic => "wic",
            Scenario::Sic => "sic",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "nic" => Ok(Scenario::Nic),
            "wic" => Ok(Scenario::Wic),
            "sic" => Ok(Scenario::Sic),
            other => Err(format!("unknown scenario '{other}' (expected nic, wic or sic)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransitionScale {
    from: usize,
    to: usize,
    scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DgmConfigFile {
    n_states: usize,
    transitions: Vec<TransitionScale>,
    beta_trans: Vec<f64>,
    #[serde(default)]
    beta_cens: Vec<f64>,
    #[serde(default)]
    lambda_cens: Option<f64>,
    horizon: f64,
}

/// Full specification of the data-generating mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DgmConfigFile", into = "DgmConfigFile")]
pub struct DgmConfig {
    pub structure: TransitionStructure,
    scales: BTreeMap<(usize, usize), f64>,
    /// Coefficients on z shared by every transition hazard.
    pub beta_trans: Vec<f64>,
    /// Coefficients on z in the censoring hazard.
    pub beta_cens: Vec<f64>,
    /// Mean waiting time of the baseline censoring distribution;
    /// `None` disables censoring entirely.
    pub lambda_cens: Option<f64>,
    pub horizon: f64,
}

impl DgmConfig {
    pub fn new(
        structure: TransitionStructure,
        scales: impl IntoIterator<Item = ((usize, usize), f64)>,
        beta_trans: Vec<f64>,
        beta_cens: Vec<f64>,
        lambda_cens: Option<f64>,
        horizon: f64,
    ) -> Result<Self, DgmError> {
        let scales: BTreeMap<(usize, usize), f64> = scales.into_iter().collect();
        for (from, to) in structure.transitions() {
            match scales.get(&(from, to)) {
                Some(&s) if s > 0.0 && s.is_finite() => {}
                Some(&s) => {
                    return Err(DgmError::InvalidConfig(format!(
                        "scale for {from} -> {to} must be positive and finite, got {s}"
                    )))
                }
                None => {
                    return Err(DgmError::InvalidConfig(format!(
                        "missing scale for transition {from} -> {to}"
                    )))
                }
            }
        }
        for key in scales.keys() {
            if !structure.allows(key.0, key.1) {
                return Err(DgmError::InvalidConfig(format!(
                    "scale given for {} -> {} which is not in the structure",
                    key.0, key.1
                )));
            }
        }
        if beta_cens.len() != beta_trans.len() {
            return Err(DgmError::InvalidConfig(format!(
                "beta_cens has {} entries, beta_trans has {}",
                beta_cens.len(),
                beta_trans.len()
            )));
        }
        if let Some(lam) = lambda_cens {
            if !(lam > 0.0) {
                return Err(DgmError::InvalidConfig(format!(
                    "lambda_cens must be positive, got {lam}"
                )));
            }
        }
        if !(horizon > 0.0) {
            return Err(DgmError::InvalidConfig(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            structure,
            scales,
            beta_trans,
            beta_cens,
            lambda_cens,
            horizon,
        })
    }

    /// The five-state breast-cancer mechanism: surgery (1), local recurrence
    /// (2), distant metastasis (3), both (4), death (5). Scales target the
    /// published 7-year cause-specific survival values.
    pub fn dgm1() -> Self {
        let structure = TransitionStructure::new(
            5,
            [
                (1, 2),
                (1, 3),
                (1, 5),
                (2, 4),
                (2, 5),
                (3, 4),
                (3, 5),
                (4, 5),
            ],
        )
        .expect("static structure is valid");
        Self::new(
            structure,
            [
                ((1, 2), 24267.0),
                ((1, 3), 11458.0),
                ((1, 5), 254394.0),
                ((2, 4), 4277.0),
                ((2, 5), 49856.0),
                ((3, 4), 7168.0),
                ((3, 5), 1348.0),
                ((4, 5), 853.0),
            ],
            vec![0.5, -0.5],
            vec![0.0, 0.0],
            Some(LAMBDA_CENS),
            HORIZON_DAYS,
        )
        .expect("static config is valid")
    }

    pub fn scale(&self, from: usize, to: usize) -> f64 {
        self.scales[&(from, to)]
    }

    pub fn scales(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.scales.iter().map(|(&k, &v)| (k, v))
    }

    pub fn with_scenario(&self, scenario: Scenario) -> Self {
        let mut cfg = self.clone();
        cfg.beta_cens = scenario.beta_cens().to_vec();
        cfg
    }

    pub fn without_censoring(&self) -> Self {
        let mut cfg = self.clone();
        cfg.lambda_cens = None;
        cfg
    }
}

impl TryFrom<DgmConfigFile> for DgmConfig {
    type Error = DgmError;
    fn try_from(f: DgmConfigFile) -> Result<Self, DgmError> {
        let structure =
            TransitionStructure::new(f.n_states, f.transitions.iter().map(|t| (t.from, t.to)))?;
        let beta_cens = if f.beta_cens.is_empty() {
            vec![0.0; f.beta_trans.len()]
        } else {
            f.beta_cens
        };
        DgmConfig::new(
            structure,
            f.transitions.iter().map(|t| ((t.from, t.to), t.scale)),
            f.beta_trans,
            beta_cens,
            f.lambda_cens,
            f.horizon,
        )
    }
}

impl From<DgmConfig> for DgmConfigFile {
    fn from(c: DgmConfig) -> Self {
        DgmConfigFile {
            n_states: c.structure.n_states(),
            transitions: c
                .scales
                .iter()
                .map(|(&(from, to), &scale)| TransitionScale { from, to, scale })
                .collect(),
            beta_trans: c.beta_trans,
            beta_cens: c.beta_cens,
            lambda_cens: c.lambda_cens,
            horizon: c.horizon,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Simulate one cohort under `config` with the censoring coefficients of
/// `scenario`. Deterministic given `seed`, independent of thread count.
pub fn simulate_cohort(
    config: &DgmConfig,
    scenario: Scenario,
    n: usize,
    seed: u64,
) -> Result<Cohort, DgmError> {
    simulate_with_config(&config.with_scenario(scenario), n, seed)
}

/// Simulate using `config.beta_cens` as given.
pub fn simulate_with_config(config: &DgmConfig, n: usize, seed: u64) -> Result<Cohort, DgmError> {
    if n == 0 {
        return Err(DgmError::InvalidConfig("n must be at least 1".into()));
    }
    let subjects: Vec<SubjectHistory> = (0..n)
        .into_par_iter()
        .map(|i| draw_subject(config, seed, i as u64))
        .collect();
    Ok(Cohort::new(config.structure.clone(), subjects)?)
}

/// One subject from its own RNG stream. Draw order is fixed (covariates,
/// censoring, then transitions) so histories agree across scenarios that
/// share a seed.
fn draw_subject(config: &DgmConfig, seed: u64, index: u64) -> SubjectHistory {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let p = config.beta_trans.len();
    let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let cens_unit: f64 = Exp1.sample(&mut rng);
    let censor = config
        .lambda_cens
        .map(|lam| cens_unit * lam / dot(&config.beta_cens, &z).exp());
    let risk = dot(&config.beta_trans, &z).exp();

    let mut path = vec![(1usize, 0.0f64)];
    let mut time = 0.0;
    let mut censored = false;
    loop {
        let current = path.last().expect("path non-empty").0;
        if config.structure.is_absorbing(current) {
            break;
        }
        let mut winner: Option<(f64, usize)> = None;
        for target in config.structure.targets_from(current) {
            let unit: f64 = Exp1.sample(&mut rng);
            let dt = unit * config.scale(current, target) / risk;
            if winner.is_none_or(|(best, _)| dt < best) {
                winner = Some((dt, target));
            }
        }
        let (dt, next) = winner.expect("non-absorbing states have targets");
        let event_time = time + dt;
        if let Some(c) = censor {
            if event_time >= c {
                censored = true;
                break;
            }
        }
        path.push((next, event_time));
        time = event_time;
    }
    SubjectHistory {
        id: index,
        path,
        censor_time: if censored { censor } else { None },
        covariates: z,
    }
}

/// Entrywise logit shift: `p -> sigmoid(logit(p) + delta)`. Rows are not
/// renormalized; the output keeps its normalization flag only when
/// `delta == 0`.
pub fn miscalibrate(preds: &PredictionMatrix, delta: f64) -> PredictionMatrix {
    let shifted = preds.probs().mapv(|p| sigmoid(logit(p) + delta));
    let mut out = PredictionMatrix::new(preds.horizon, shifted, false)
        .expect("logit shift keeps entries in [0, 1]");
    out.row_normalized = preds.row_normalized && delta == 0.0;
    out.clamped = preds.clamped;
    out
}

/// Without-replacement draw of `n_sub` indices out of `n_total`,
/// deterministic per `(seed, iteration)`.
pub fn subsample_indices(n_total: usize, n_sub: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(mix(seed, 0x5ab5a317, iteration));
    rand::seq::index::sample(&mut rng, n_total, n_sub).into_vec()
}

/// Sample `n_sub` subjects without replacement. Deterministic per
/// `(seed, iteration)` and independent of the superpopulation's seed.
pub fn subsample(cohort: &Cohort, n_sub: usize, seed: u64, iteration: u64) -> Result<Cohort, DgmError> {
    if n_sub == 0 || n_sub > cohort.n() {
        return Err(DgmError::InvalidConfig(format!(
            "subsample size {n_sub} outside 1..={}",
            cohort.n()
        )));
    }
    let subjects = subsample_indices(cohort.n(), n_sub, seed, iteration)
        .into_iter()
        .map(|i| cohort.subjects()[i].clone())
        .collect();
    Ok(Cohort::new(cohort.structure().clone(), subjects)?)
}

/// Generate a superpopulation and return one without-replacement subsample.
/// Callers looping over iterations should generate the superpopulation once
/// and call [`subsample`] directly.
pub fn superpopulation_sample(
    config: &DgmConfig,
    scenario: Scenario,
    n_super: usize,
    n_sub: usize,
    seed: u64,
    iteration: u64,
) -> Result<Cohort, DgmError> {
    let superpop = simulate_cohort(config, scenario, n_super, seed)?;
    subsample(&superpop, n_sub, seed, iteration)
}

/// splitmix64-style mixing for deriving auxiliary seeds.
pub(crate) fn mix(seed: u64, tag: u64, idx: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15) ^ idx.wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
