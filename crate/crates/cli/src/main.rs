//! `mscalib` command line: simulate multistate cohorts, compute exact
//! transition probabilities, assess calibration of predicted transition
//! probabilities, and run the bias experiments.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data integrity
//! error, 4 numerical failure.

mod manifest;
mod svg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use mscalib::calibration::{
    bootstrap_se, moderate_results, CalibrationError, Method, MethodSpec, WeightSource,
};
use mscalib::data::{self, Cohort, PredictionMatrix, TransitionStructure};
use mscalib::dgm::{self, DgmConfig, Scenario};
use mscalib::experiment::{
    run_large_sample, run_small_sample, ExperimentSpec, PredictionVariant, WeightVariant,
};
use mscalib::ipcw::WeightVector;
use mscalib::truth;

use manifest::RunManifest;

#[derive(Debug)]
enum AppError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Data(_) => 3,
            AppError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Usage(format!("io error: {e}"))
    }
}

impl From<data::DataError> for AppError {
    fn from(e: data::DataError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<dgm::DgmError> for AppError {
    fn from(e: dgm::DgmError) -> Self {
        match e {
            dgm::DgmError::InvalidConfig(m) => AppError::Usage(m),
            dgm::DgmError::Data(d) => AppError::Data(d.to_string()),
        }
    }
}

impl From<truth::TruthError> for AppError {
    fn from(e: truth::TruthError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<CalibrationError> for AppError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Data(d) => AppError::Data(d.to_string()),
            CalibrationError::MissingWeight(i) => {
                AppError::Data(format!("included subject at row {i} has no weight"))
            }
            other => AppError::Numeric(other.to_string()),
        }
    }
}

impl From<mscalib::experiment::ExperimentError> for AppError {
    fn from(e: mscalib::experiment::ExperimentError) -> Self {
        use mscalib::experiment::ExperimentError::*;
        match e {
            Dgm(d) => d.into(),
            Calibration(c) => c.into(),
            Truth(t) => t.into(),
            other => AppError::Usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mscalib",
    version,
    about = "Calibration assessment for multistate risk-prediction models"
)]
struct Cli {
    /// Cap the rayon worker pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multistate cohort with controlled censoring.
    Simulate(SimulateArgs),
    /// Assess calibration of predicted transition probabilities.
    Calibrate(CalibrateArgs),
    /// Exact transition probabilities for given covariates.
    Truth(TruthArgs),
    /// Large- or small-sample bias experiments.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Nic,
    Wic,
    Sic,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Scenario {
        match s {
            ScenarioArg::Nic => Scenario::Nic,
            ScenarioArg::Wic => Scenario::Wic,
            ScenarioArg::Sic => Scenario::Sic,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: ScenarioArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// DgmConfig JSON; defaults to the built-in five-state mechanism.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Aj,
    Pv,
    Blr,
    Mlr,
    All,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Aj => vec![Method::Aj],
            MethodArg::Pv => vec![Method::Pv],
            MethodArg::Blr => vec![Method::Blr],
            MethodArg::Mlr => vec![Method::Mlr],
            MethodArg::All => vec![Method::Aj, Method::Pv, Method::Blr, Method::Mlr],
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Long-format cohort CSV (id,from,to,tstart,tstop,status,z1..zp).
    #[arg(long)]
    data: PathBuf,
    /// Prediction CSV (id,p1..pK).
    #[arg(long)]
    pred: PathBuf,
    /// Evaluation horizon in days.
    #[arg(long)]
    horizon: f64,
    #[arg(long, value_enum, default_value = "all")]
    method: MethodArg,
    #[arg(long, default_value_t = 20)]
    groups: usize,
    #[arg(long, default_value_t = 0.75)]
    span: f64,
    /// Spline degrees of freedom for the MLR scatter.
    #[arg(long, default_value_t = 4)]
    df: usize,
    /// `estimated`, `none`, or a path to an id,weight CSV.
    #[arg(long, default_value = "estimated")]
    weights: String,
    #[arg(long, default_value_t = 10.0)]
    cap: f64,
    #[arg(long)]
    out: PathBuf,
    /// Transition-structure JSON; inferred from the data when omitted.
    #[arg(long)]
    structure: Option<PathBuf>,
    /// Bootstrap replicates for mean-calibration standard errors.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Also render one SVG plot per state and method.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct TruthArgs {
    /// DgmConfig JSON describing the mechanism.
    #[arg(long)]
    config: PathBuf,
    /// Covariate CSV (id,z1..zp).
    #[arg(long)]
    covariates: PathBuf,
    /// Override the horizon from the config.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Perfect,
    Over,
    Under,
}

impl From<VariantArg> for PredictionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Perfect => PredictionVariant::Perfect,
            VariantArg::Over => PredictionVariant::Over,
            VariantArg::Under => PredictionVariant::Under,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightsArg {
    Estimated,
    Misspecified,
    True,
    None,
}

impl From<WeightsArg> for WeightVariant {
    fn from(w: WeightsArg) -> Self {
        match w {
            WeightsArg::Estimated => WeightVariant::Estimated,
            WeightsArg::Misspecified => WeightVariant::Misspecified,
            WeightsArg::True => WeightVariant::True,
            WeightsArg::None => WeightVariant::None,
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    scenario: ScenarioArg,
    /// Validation sample size; desk-scale default stands in for the
    /// full-scale run.
    #[arg(long)]
    n: Option<usize>,
    /// Run the repeated small-sample study instead of the large-sample one.
    #[arg(long)]
    small: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    superpop: Option<usize>,
    #[arg(long, value_enum, default_value = "perfect")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "estimated")]
    weights: WeightsArg,
    #[arg(long, default_value_t = 20)]
    groups: usize,
    #[arg(long, default_value_t = 0.75)]
    span: f64,
    #[arg(long, default_value_t = 4)]
    df: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Bootstrap replicates for large-sample standard errors.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Lift the desk-scale defaults to the full published scale.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    out: PathBuf,
    /// DgmConfig JSON; defaults to the built-in five-state mechanism.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore failure: the pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Truth(args) => cmd_truth(args),
        Command::Experiment(args) => cmd_experiment(args),
    };
    if let Err(err) = result {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<DgmConfig, AppError> {
    match path {
        None => Ok(DgmConfig::dgm1()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| AppError::Usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn ensure_out_dir(path: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn covariate_csv(cohort: &Cohort) -> String {
    let mut out = String::from("id");
    for j in 1..=cohort.covariate_dim() {
        let _ = write!(out, ",z{j}");
    }
    out.push('\n');
    for s in cohort.subjects() {
        let _ = write!(out, "{}", s.id);
        for v in &s.covariates {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), AppError> {
    let config = load_config(&args.config)?;
    let scenario: Scenario = args.scenario.into();
    let cohort = dgm::simulate_cohort(&config, scenario, args.n, args.seed)?;
    ensure_out_dir(&args.out)?;

    let mut manifest = RunManifest::new(
        "simulate",
        serde_json::json!({
            "scenario": scenario.name(),
            "n": args.n,
            "config": config.with_scenario(scenario),
        }),
        Some(args.seed),
    );
    if let Some(path) = &args.config {
        manifest.digest_input(path)?;
    }
    let cohort_path = args.out.join("cohort.csv");
    std::fs::write(&cohort_path, cohort.to_long_csv())?;
    manifest.record_output(&cohort_path);
    let cov_path = args.out.join("covariates.csv");
    std::fs::write(&cov_path, covariate_csv(&cohort))?;
    manifest.record_output(&cov_path);
    manifest.write(&args.out)?;
    Ok(())
}

fn parse_covariate_csv(text: &str) -> Result<(Vec<u64>, Array2<f64>), AppError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| AppError::Data("empty covariate file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first().map(|s| s.trim()) != Some("id") {
        return Err(AppError::Data("covariate header must start with id".into()));
    }
    let p = cols.len() - 1;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != p + 1 {
            return Err(AppError::Data(format!(
                "covariate line {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                p + 1
            )));
        }
        let id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| AppError::Data(format!("bad id on line {}", lineno + 2)))?;
        ids.push(id);
        for field in &fields[1..] {
            let v: f64 = field.trim().parse().map_err(|_| {
                AppError::Data(format!("bad covariate on line {}", lineno + 2))
            })?;
            values.push(v);
        }
    }
    let n = ids.len();
    Ok((
        ids,
        Array2::from_shape_vec((n, p), values).expect("shape follows construction"),
    ))
}

fn cmd_truth(args: TruthArgs) -> Result<(), AppError> {
    let config = load_config(&Some(args.config.clone()))?;
    let text = std::fs::read_to_string(&args.covariates)?;
    let (ids, z) = parse_covariate_csv(&text)?;
    let horizon = args.horizon.unwrap_or(config.horizon);
    let truths = truth::true_probs(&config, &z, horizon)?;
    ensure_out_dir(&args.out)?;

    let mut manifest = RunManifest::new(
        "truth",
        serde_json::json!({ "horizon": horizon, "config": config }),
        None,
    );
    manifest.digest_input(&args.config)?;
    manifest.digest_input(&args.covariates)?;
    let out_path = args.out.join("truth.csv");
    std::fs::write(&out_path, truths.to_prediction_matrix().to_csv(&ids))?;
    manifest.record_output(&out_path);
    manifest.write(&args.out)?;
    Ok(())
}

fn parse_weight_csv(text: &str, ids: &[u64]) -> Result<WeightVector, AppError> {
    let mut by_id: BTreeMap<u64, Option<f64>> = BTreeMap::new();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| AppError::Data("empty weight file".into()))?;
    if header.trim() != "id,weight" {
        return Err(AppError::Data("weight header must be id,weight".into()));
    }
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id_str, w_str) = line
            .split_once(',')
            .ok_or_else(|| AppError::Data(format!("bad weight line {}", lineno + 2)))?;
        let id: u64 = id_str
            .trim()
            .parse()
            .map_err(|_| AppError::Data(format!("bad id on weight line {}", lineno + 2)))?;
        let weight = if w_str.trim().is_empty() {
            None
        } else {
            Some(w_str.trim().parse().map_err(|_| {
                AppError::Data(format!("bad weight on line {}", lineno + 2))
            })?)
        };
        by_id.insert(id, weight);
    }
    let weights = ids
        .iter()
        .map(|id| by_id.get(id).copied().flatten())
        .collect();
    Ok(WeightVector {
        weights,
        cap: f64::INFINITY,
        zero_survival_count: 0,
    })
}

/// Join prediction rows onto the cohort's subject order; any id mismatch is
/// a data-integrity failure listing the first ten offenders.
fn join_predictions(
    cohort: &Cohort,
    pred_ids: &[u64],
    preds: &PredictionMatrix,
) -> Result<PredictionMatrix, AppError> {
    let by_id: BTreeMap<u64, usize> = pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let cohort_ids = cohort.ids();
    let mut missing: Vec<u64> = cohort_ids
        .iter()
        .filter(|id| !by_id.contains_key(id))
        .copied()
        .collect();
    let cohort_set: std::collections::BTreeSet<u64> = cohort_ids.iter().copied().collect();
    let extra: Vec<u64> = pred_ids
        .iter()
        .filter(|id| !cohort_set.contains(id))
        .copied()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        missing.extend(extra);
        missing.truncate(10);
        return Err(AppError::Data(format!(
            "data and prediction files disagree on ids; first offenders: {missing:?}"
        )));
    }
    let k = preds.n_states();
    let mut probs = Array2::zeros((cohort.n(), k));
    for (row, id) in cohort_ids.iter().enumerate() {
        let src = by_id[id];
        for c in 0..k {
            probs[[row, c]] = preds.probs()[[src, c]];
        }
    }
    PredictionMatrix::new(preds.horizon, probs, true).map_err(AppError::from)
}

fn weak_columns(result: &mscalib::CalibrationResult) -> (String, String) {
    match &result.weak {
        Some(w) => (
            w.intercept.map(|v| v.to_string()).unwrap_or_default(),
            w.slope.to_string(),
        ),
        None => (String::new(), String::new()),
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), AppError> {
    let data_text = std::fs::read_to_string(&args.data)?;
    let pred_text = std::fs::read_to_string(&args.pred)?;
    let (pred_ids, raw_preds) = data::parse_prediction_csv(&pred_text, args.horizon)?;

    let structure: TransitionStructure = match &args.structure {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| {
                AppError::Usage(format!("invalid structure {}: {e}", path.display()))
            })?
        }
        None => data::infer_structure(&data_text, Some(raw_preds.n_states()))?,
    };
    let cohort = data::parse_long_format(&data_text, &structure)?;
    let preds = join_predictions(&cohort, &pred_ids, &raw_preds)?;

    let weight_source = match args.weights.as_str() {
        "estimated" => None,
        "none" => Some(WeightVector::unit(&cohort, args.horizon)),
        path => {
            let text = std::fs::read_to_string(path)?;
            Some(parse_weight_csv(&text, &cohort.ids())?)
        }
    };

    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new(
        "calibrate",
        serde_json::json!({
            "horizon": args.horizon,
            "method": format!("{:?}", args.method).to_lowercase(),
            "groups": args.groups,
            "span": args.span,
            "df": args.df,
            "weights": args.weights,
            "cap": args.cap,
        }),
        None,
    );
    manifest.digest_input(&args.data)?;
    manifest.digest_input(&args.pred)?;

    // Export the weights actually used for audit.
    let audit_weights = match &weight_source {
        Some(w) => w.clone(),
        None => mscalib::ipcw::estimated_weights(&cohort, args.horizon, args.cap)
            .map_err(|e| AppError::Numeric(e.to_string()))?,
    };
    let weights_path = args.out.join("weights.csv");
    std::fs::write(&weights_path, audit_weights.to_csv(&cohort.ids()))?;
    manifest.record_output(&weights_path);

    let mut summary = String::from("method,state,mean_calibration,se,intercept,slope\n");
    for method in args.method.methods() {
        let source = match &weight_source {
            Some(_) => WeightSource::Unit, // placeholder, weights passed below
            None => WeightSource::Estimated,
        };
        let spec = MethodSpec {
            method,
            groups: args.groups,
            span: args.span,
            df: args.df,
            weight_source: source,
            cap: args.cap,
        };
        let results = match &weight_source {
            Some(w) => moderate_results_with_weights(&spec, &cohort, &preds, w)?,
            None => moderate_results(&spec, &cohort, &preds)?,
        };
        let ses: Option<Vec<f64>> = match args.bootstrap {
            Some(b) if weight_source.is_none() => {
                Some(bootstrap_se(&spec, &cohort, &preds, b, 42)?)
            }
            Some(b) => {
                // Fixed external weights cannot be refit; bootstrap with the
                // unit-weight spec is not meaningful, so refuse.
                return Err(AppError::Usage(format!(
                    "--bootstrap {b} requires --weights estimated (weights must be refittable)"
                )));
            }
            None => None,
        };
        for result in &results {
            let (intercept, slope) = weak_columns(result);
            let se = ses
                .as_ref()
                .map(|s| s[result.state - 1].to_string())
                .unwrap_or_default();
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{}",
                method.name(),
                result.state,
                result.mean_calibration,
                se,
                intercept,
                slope
            );

            let mut curve = String::from("state,predicted,observed,rug\n");
            let mut rug: Vec<f64> = preds.state_column(result.state).to_vec();
            rug.sort_by(f64::total_cmp);
            let rows = result.points.len().max(rug.len());
            for r in 0..rows {
                let (p, o) = result
                    .points
                    .get(r)
                    .map(|&(p, o)| (p.to_string(), o.to_string()))
                    .unwrap_or_default();
                let rug_v = rug.get(r).map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(curve, "{},{},{},{}", result.state, p, o, rug_v);
            }
            let curve_path = args
                .out
                .join(format!("curve_{}_{}.csv", method.name(), result.state));
            std::fs::write(&curve_path, curve)?;
            manifest.record_output(&curve_path);

            if args.svg {
                let plot = svg::calibration_plot(
                    &format!("{} state {}", method.name(), result.state),
                    &result.points,
                    None,
                    &rug,
                    method == Method::Mlr,
                );
                let svg_path = args
                    .out
                    .join(format!("calibration_{}_{}.svg", method.name(), result.state));
                std::fs::write(&svg_path, plot)?;
                manifest.record_output(&svg_path);
            }
        }
    }
    let summary_path = args.out.join("summary.csv");
    std::fs::write(&summary_path, summary)?;
    manifest.record_output(&summary_path);
    manifest.write(&args.out)?;
    Ok(())
}

/// Method runs with externally supplied weights (file or `none`).
fn moderate_results_with_weights(
    spec: &MethodSpec,
    cohort: &Cohort,
    preds: &PredictionMatrix,
    weights: &WeightVector,
) -> Result<Vec<mscalib::CalibrationResult>, AppError> {
    use mscalib::calibration as cal;
    let indicators = cal::HorizonIndicators::from_cohort(cohort, preds.horizon);
    let k = cohort.structure().n_states();
    let results = match spec.method {
        Method::Aj | Method::Pv => moderate_results(spec, cohort, preds)?,
        Method::Blr => (1..=k)
            .map(|state| cal::blr_moderate(preds, &indicators, weights, state, spec.span))
            .collect::<Result<Vec<_>, _>>()?,
        Method::Mlr => cal::mlr_moderate(preds, &indicators, weights, spec.df)?,
    };
    Ok(results)
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), AppError> {
    let scenario: Scenario = args.scenario.into();
    let mut spec = if args.small {
        ExperimentSpec::small(scenario)
    } else {
        ExperimentSpec::large(scenario)
    };
    spec.config = load_config(&args.config)?;
    if args.paper_scale {
        spec.n = if args.small { 3000 } else { 200_000 };
        spec.iterations = if args.small { 1000 } else { 1 };
        spec.superpopulation = 1_000_000;
        eprintln!(
            "warning: --paper-scale selected (n = {}, superpopulation = {}, iterations = {}); \
             expect a runtime of hours rather than minutes",
            spec.n, spec.superpopulation, spec.iterations
        );
    }
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(iterations) = args.iterations {
        spec.iterations = iterations;
    }
    if let Some(superpop) = args.superpop {
        spec.superpopulation = superpop;
    }
    spec.prediction_variant = args.variant.into();
    spec.weight_variant = args.weights.into();
    spec.groups = args.groups;
    spec.span = args.span;
    spec.df = args.df;
    spec.seed = args.seed;
    spec.bootstrap = args.bootstrap;

    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new(
        "experiment",
        serde_json::json!({
            "scenario": scenario.name(),
            "n": spec.n,
            "small": args.small,
            "iterations": spec.iterations,
            "superpopulation": spec.superpopulation,
            "variant": spec.prediction_variant.name(),
            "weights": spec.weight_variant.name(),
            "groups": spec.groups,
            "span": spec.span,
            "df": spec.df,
            "bootstrap": spec.bootstrap,
            "paper_scale": args.paper_scale,
        }),
        Some(spec.seed),
    );

    if args.small {
        if !args.paper_scale && spec.iterations == 1 {
            return Err(AppError::Usage(
                "--small needs --iterations of at least 2".into(),
            ));
        }
        let report = run_small_sample(&spec)?;
        let report_path = args.out.join("bias_report.csv");
        std::fs::write(&report_path, report.to_csv())?;
        manifest.record_output(&report_path);
    } else {
        let output = run_large_sample(&spec)?;
        let report_path = args.out.join("bias_report.csv");
        std::fs::write(&report_path, output.report.to_csv())?;
        manifest.record_output(&report_path);
        for curve in &output.curves {
            let path = args.out.join(format!(
                "curve_{}_{}.csv",
                curve.method.name(),
                curve.state
            ));
            std::fs::write(&path, curve.to_csv(&output.rug[curve.state - 1]))?;
            manifest.record_output(&path);
        }
    }
    manifest.write(&args.out)?;
    Ok(())
}
