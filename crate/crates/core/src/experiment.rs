//! Orchestration of the large-sample and repeated small-sample simulation
//! studies: simulate, compute truths, derive prediction variants, fit
//! weights, run every requested calibration method, and compare against the
//! estimand.
//!
//! Bias is oriented as estimated mean calibration minus estimand mean, both
//! on the (observed-or-true minus predicted) scale.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    mean_calibration_vector, moderate_results, CalibrationError, Method, MethodSpec, WeightSource,
};
use crate::data::clamp_predictions;
use crate::dgm::{self, DgmConfig, DgmError, Scenario};
use crate::truth::{self, Estimand, ReferenceCurve, TruthError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dgm(#[from] DgmError),
    #[error(transparent)]
    Truth(#[from] TruthError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("large-sample runs use exactly one iteration, got {0}")]
    NotSingleIteration(usize),
    #[error("small-sample runs need at least two iterations, got {0}")]
    TooFewIterations(usize),
    #[error("percentile band ({0}, {1}) invalid; need 0 <= lo < hi <= 100")]
    InvalidBand(f64, f64),
    #[error("no curve points fall inside the band")]
    EmptyBand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionVariant {
    Perfect,
    Over,
    Under,
}

impl PredictionVariant {
    pub fn logit_shift(self) -> f64 {
        match self {
            PredictionVariant::Perfect => 0.0,
            PredictionVariant::Over => 0.5,
            PredictionVariant::Under => -0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PredictionVariant::Perfect => "perfect",
            PredictionVariant::Over => "over",
            PredictionVariant::Under => "under",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightVariant {
    Estimated,
    Misspecified,
    True,
    None,
}

impl WeightVariant {
    fn to_source(self, config: &DgmConfig) -> WeightSource {
        match self {
            WeightVariant::Estimated => WeightSource::Estimated,
            WeightVariant::Misspecified => WeightSource::Misspecified,
            WeightVariant::True => WeightSource::True(Box::new(config.clone())),
            WeightVariant::None => WeightSource::Unit,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightVariant::Estimated => "estimated",
            WeightVariant::Misspecified => "misspecified",
            WeightVariant::True => "true",
            WeightVariant::None => "none",
        }
    }
}

/// Full specification of one simulation experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: DgmConfig,
    pub scenario: Scenario,
    pub n: usize,
    /// 1 for the large-sample study; the repetition count otherwise.
    pub iterations: usize,
    pub methods: Vec<Method>,
    pub prediction_variant: PredictionVariant,
    pub weight_variant: WeightVariant,
    pub groups: usize,
    pub span: f64,
    pub df: usize,
    pub seed: u64,
    /// Superpopulation size for the small-sample study.
    pub superpopulation: usize,
    /// Bootstrap replicates for large-sample standard errors; off by default.
    pub bootstrap: Option<usize>,
    pub cap: f64,
}

impl ExperimentSpec {
    /// Desk-scale large-sample defaults (n = 20,000 stands in for the
    /// full-scale 200,000).
    pub fn large(scenario: Scenario) -> Self {
        ExperimentSpec {
            config: DgmConfig::dgm1(),
            scenario,
            n: 20_000,
            iterations: 1,
            methods: vec![Method::Aj, Method::Pv, Method::Blr, Method::Mlr],
            prediction_variant: PredictionVariant::Perfect,
            weight_variant: WeightVariant::Estimated,
            groups: 20,
            span: 0.75,
            df: 4,
            seed: 42,
            superpopulation: 100_000,
            bootstrap: None,
            cap: f64::INFINITY,
        }
    }

    /// Desk-scale small-sample defaults (200 iterations of n = 3000 from a
    /// 100,000 superpopulation; the pseudo-value method is skipped by
    /// default as it adds nothing over the grouped estimator for mean
    /// calibration).
    pub fn small(scenario: Scenario) -> Self {
        ExperimentSpec {
            n: 3000,
            iterations: 200,
            methods: vec![Method::Aj, Method::Blr, Method::Mlr],
            ..Self::large(scenario)
        }
    }

    fn method_spec(&self, method: Method, config: &DgmConfig) -> MethodSpec {
        MethodSpec {
            method,
            groups: self.groups,
            span: self.span,
            df: self.df,
            weight_source: self.weight_variant.to_source(config),
            cap: self.cap,
        }
    }
}

/// One method/state cell of the bias report.
#[derive(Debug, Clone, Serialize)]
pub struct BiasCell {
    pub method: &'static str,
    pub state: usize,
    pub bias: Option<f64>,
    pub se: Option<f64>,
    pub median_bias: Option<f64>,
    pub pct_2_5: Option<f64>,
    pub pct_97_5: Option<f64>,
    pub failures: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BiasReport {
    pub cells: Vec<BiasCell>,
}

impl BiasReport {
    pub fn cell(&self, method: Method, state: usize) -> Option<&BiasCell> {
        self.cells
            .iter()
            .find(|c| c.method == method.name() && c.state == state)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,state,bias,se,median_bias,pct_2_5,pct_97_5,failures,error\n");
        let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.method,
                c.state,
                fmt(&c.bias),
                fmt(&c.se),
                fmt(&c.median_bias),
                fmt(&c.pct_2_5),
                fmt(&c.pct_97_5),
                c.failures,
                c.error.clone().unwrap_or_default()
            ));
        }
        out
    }
}

/// One method/state calibration curve with the true reference evaluated at
/// the same abscissae.
#[derive(Debug, Clone)]
pub struct MethodCurve {
    pub method: Method,
    pub state: usize,
    pub points: Vec<(f64, f64)>,
    pub reference: Vec<f64>,
}

impl MethodCurve {
    /// Two row kinds: the curve points and the per-subject rug of predicted
    /// values.
    pub fn to_csv(&self, rug: &[f64]) -> String {
        let mut out = String::from("kind,predicted,observed,reference\n");
        for ((x, y), r) in self.points.iter().zip(&self.reference) {
            out.push_str(&format!("curve,{x},{y},{r}\n"));
        }
        for x in rug {
            out.push_str(&format!("rug,{x},,\n"));
        }
        out
    }
}

#[derive(Debug)]
pub struct LargeSampleOutput {
    pub report: BiasReport,
    pub curves: Vec<MethodCurve>,
    /// Sorted predicted values per state (the rug / density band source).
    pub rug: Vec<Vec<f64>>,
    pub estimand: Estimand,
}

/// Steps 1-5 of the large-sample study for one scenario and one prediction
/// variant. Method failures are recorded per cell and do not abort the run.
pub fn run_large_sample(spec: &ExperimentSpec) -> Result<LargeSampleOutput, ExperimentError> {
    if spec.iterations != 1 {
        return Err(ExperimentError::NotSingleIteration(spec.iterations));
    }
    let config = spec.config.with_scenario(spec.scenario);
    let horizon = config.horizon;
    let cohort = dgm::simulate_with_config(&config, spec.n, spec.seed)?;
    let truths = truth::true_probs(&config, &cohort.covariate_matrix(), horizon)?;
    let perfect = clamp_predictions(&truths.to_prediction_matrix(), crate::data::DEFAULT_CLAMP_EPS);
    let preds = dgm::miscalibrate(&perfect, spec.prediction_variant.logit_shift());
    let estimand = truth::compute_estimand(&preds, &truths)?;

    let k = config.structure.n_states();
    let mut rug = Vec::with_capacity(k);
    for state in 1..=k {
        let mut xs: Vec<f64> = preds.state_column(state).to_vec();
        xs.sort_by(f64::total_cmp);
        rug.push(xs);
    }

    let mut cells = Vec::new();
    let mut curves = Vec::new();
    for &method in &spec.methods {
        let mspec = spec.method_spec(method, &config);
        match moderate_results(&mspec, &cohort, &preds) {
            Ok(results) => {
                let means: Vec<f64> = results.iter().map(|r| r.mean_calibration).collect();
                let ses: Option<Vec<f64>> = spec.bootstrap.and_then(|b| {
                    crate::calibration::bootstrap_se(&mspec, &cohort, &preds, b, spec.seed).ok()
                });
                for (result, mean) in results.into_iter().zip(&means) {
                    let reference_curve = ReferenceCurve::from_estimand(&estimand, result.state);
                    let reference = result
                        .points
                        .iter()
                        .map(|&(x, _)| reference_curve.eval(x).0)
                        .collect();
                    cells.push(BiasCell {
                        method: method.name(),
                        state: result.state,
                        bias: Some(mean - estimand.mean[result.state - 1]),
                        se: ses.as_ref().map(|s| s[result.state - 1]),
                        median_bias: None,
                        pct_2_5: None,
                        pct_97_5: None,
                        failures: 0,
                        error: None,
                    });
                    curves.push(MethodCurve {
                        method,
                        state: result.state,
                        points: result.points,
                        reference,
                    });
                }
            }
            Err(err) => {
                for state in 1..=k {
                    cells.push(BiasCell {
                        method: method.name(),
                        state,
                        bias: None,
                        se: None,
                        median_bias: None,
                        pct_2_5: None,
                        pct_97_5: None,
                        failures: 1,
                        error: Some(err.to_string()),
                    });
                }
            }
        }
    }
    Ok(LargeSampleOutput {
        report: BiasReport { cells },
        curves,
        rug,
        estimand,
    })
}

/// Type-7 percentile of a sorted sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The repeated small-sample study: subsample the superpopulation, assess
/// mean calibration per method, and report median bias with the 2.5-97.5
/// percentile range across iterations.
pub fn run_small_sample(spec: &ExperimentSpec) -> Result<BiasReport, ExperimentError> {
    if spec.iterations < 2 {
        return Err(ExperimentError::TooFewIterations(spec.iterations));
    }
    let config = spec.config.with_scenario(spec.scenario);
    let horizon = config.horizon;
    let superpop = dgm::simulate_with_config(&config, spec.superpopulation, spec.seed)?;
    let super_truths = truth::true_probs(&config, &superpop.covariate_matrix(), horizon)?;
    let k = config.structure.n_states();

    type IterationResult = Vec<Option<Vec<f64>>>;
    let iteration_biases: Vec<IterationResult> = (0..spec.iterations)
        .into_par_iter()
        .map(|iteration| {
            let run = || -> Result<IterationResult, ExperimentError> {
                let indices =
                    dgm::subsample_indices(superpop.n(), spec.n, spec.seed, iteration as u64);
                let subjects = indices
                    .iter()
                    .map(|&i| superpop.subjects()[i].clone())
                    .collect();
                let cohort = crate::data::Cohort::new(superpop.structure().clone(), subjects)
                    .map_err(DgmError::from)?;
                let mut probs = ndarray::Array2::zeros((spec.n, k));
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..k {
                        probs[[row, c]] = super_truths.probs[[i, c]];
                    }
                }
                let truths = truth::TrueProbs {
                    horizon,
                    probs,
                };
                let perfect = clamp_predictions(
                    &truths.to_prediction_matrix(),
                    crate::data::DEFAULT_CLAMP_EPS,
                );
                let preds = dgm::miscalibrate(&perfect, spec.prediction_variant.logit_shift());
                let estimand = truth::compute_estimand(&preds, &truths)?;
                Ok(spec
                    .methods
                    .iter()
                    .map(|&method| {
                        let mspec = spec.method_spec(method, &config);
                        mean_calibration_vector(&mspec, &cohort, &preds)
                            .ok()
                            .map(|means| {
                                means
                                    .iter()
                                    .zip(&estimand.mean)
                                    .map(|(m, e)| m - e)
                                    .collect::<Vec<f64>>()
                            })
                    })
                    .collect())
            };
            run().unwrap_or_else(|_| vec![None; spec.methods.len()])
        })
        .collect();

    let mut cells = Vec::new();
    for (mi, &method) in spec.methods.iter().enumerate() {
        for state in 1..=k {
            let mut biases: Vec<f64> = Vec::with_capacity(spec.iterations);
            let mut failures = 0;
            for iteration in &iteration_biases {
                match &iteration[mi] {
                    Some(v) => biases.push(v[state - 1]),
                    None => failures += 1,
                }
            }
            biases.sort_by(f64::total_cmp);
            let (median, lo, hi) = if biases.is_empty() {
                (None, None, None)
            } else {
                (
                    Some(percentile(&biases, 50.0)),
                    Some(percentile(&biases, 2.5)),
                    Some(percentile(&biases, 97.5)),
                )
            };
            cells.push(BiasCell {
                method: method.name(),
                state,
                bias: None,
                se: None,
                median_bias: median,
                pct_2_5: lo,
                pct_97_5: hi,
                failures,
                error: None,
            });
        }
    }
    Ok(BiasReport { cells })
}

/// Maximum absolute deviation between an estimated curve and the reference,
/// restricted to points whose abscissa lies within the given empirical
/// percentile band of the rug values.
pub fn compare_curves(
    points: &[(f64, f64)],
    reference: &ReferenceCurve,
    rug: &[f64],
    band: (f64, f64),
) -> Result<f64, ExperimentError> {
    let (lo, hi) = band;
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(ExperimentError::InvalidBand(lo, hi));
    }
    let mut sorted = rug.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return Err(ExperimentError::EmptyBand);
    }
    let q_lo = percentile(&sorted, lo);
    let q_hi = percentile(&sorted, hi);
    let mut max_dev: Option<f64> = None;
    for &(x, y) in points {
        if x >= q_lo && x <= q_hi {
            let (r, _) = reference.eval(x);
            let dev = (y - r).abs();
            max_dev = Some(max_dev.map_or(dev, |m: f64| m.max(dev)));
        }
    }
    max_dev.ok_or(ExperimentError::EmptyBand)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(percentile(&v, 50.0), 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(percentile(&v, 0.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(percentile(&v, 100.0), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn compare_curves_identity_and_offset() {
        let estimand = Estimand {
            points: vec![(0..11)
                .map(|i| (i as f64 / 10.0, i as f64 / 10.0))
                .collect()],
            mean: vec![0.0],
        };
        let reference = ReferenceCurve::from_estimand(&estimand, 1);
        let rug: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let identical: Vec<(f64, f64)> = (0..11)
            .map(|i| (i as f64 / 10.0, i as f64 / 10.0))
            .collect();
        assert_eq!(
            compare_curves(&identical, &reference, &rug, (5.0, 95.0)).unwrap(),
            0.0
        );
        let offset: Vec<(f64, f64)> = identical
            .iter()
            .map(|&(x, y)| (x, y + 0.07))
            .collect();
        assert_abs_diff_eq!(
            compare_curves(&offset, &reference, &rug, (5.0, 95.0)).unwrap(),
            0.07,
            epsilon = 1e-12
        );
        assert!(matches!(
            compare_curves(&identical, &reference, &rug, (90.0, 10.0)),
            Err(ExperimentError::InvalidBand(..))
        ));
    }

    #[test]
    fn small_sample_report_is_deterministic() {
        let mut spec = ExperimentSpec::small(Scenario::Nic);
        spec.superpopulation = 2000;
        spec.n = 300;
        spec.iterations = 4;
        spec.methods = vec![Method::Aj];
        spec.groups = 5;
        let a = run_small_sample(&spec).unwrap();
        let b = run_small_sample(&spec).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        // Serial pool gives the same bytes.
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let c = pool.install(|| run_small_sample(&spec).unwrap());
        assert_eq!(a.to_csv(), c.to_csv());
        for cell in &a.cells {
            let (lo, hi) = (cell.pct_2_5.unwrap(), cell.pct_97_5.unwrap());
            assert!(lo <= cell.median_bias.unwrap());
            assert!(cell.median_bias.unwrap() <= hi);
        }
    }

    #[test]
    fn large_sample_smoke_run_produces_all_cells() {
        let mut spec = ExperimentSpec::large(Scenario::Nic);
        spec.n = 800;
        spec.methods = vec![Method::Aj, Method::Blr];
        spec.groups = 8;
        let out = run_large_sample(&spec).unwrap();
        assert_eq!(out.report.cells.len(), 10);
        assert_eq!(out.curves.len(), 10);
        for cell in &out.report.cells {
            assert!(cell.error.is_none(), "{:?}", cell.error);
            assert!(cell.bias.unwrap().abs() < 0.1);
        }
        for curve in &out.curves {
            assert_eq!(curve.points.len(), curve.reference.len());
            let csv = curve.to_csv(&out.rug[curve.state - 1]);
            assert!(csv.starts_with("kind,predicted,observed,reference\n"));
        }
    }
}
