//! Benchmarks for the hot paths: the product-integral sweep, leave-one-out
//! pseudo-values, the Cox censoring fit, weighted loess, the multinomial
//! recalibration, and the quadrature truth engine.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::hint::black_box;

use mscalib::aalen_johansen::aalen_johansen;
use mscalib::calibration::{mlr_moderate, pseudo_values, HorizonIndicators};
use mscalib::data::{clamp_predictions, Cohort, PredictionMatrix};
use mscalib::dgm::{self, DgmConfig, Scenario, HORIZON_DAYS};
use mscalib::ipcw::{censoring_dataset, estimated_weights, fit_cox};
use mscalib::smoothers::loess;
use mscalib::truth::true_prob_vector;

fn cohort(n: usize) -> Cohort {
    dgm::simulate_cohort(&DgmConfig::dgm1(), Scenario::Nic, n, 42).unwrap()
}

fn random_preds(n: usize) -> PredictionMatrix {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let mut probs = Array2::zeros((n, 5));
    for i in 0..n {
        let mut row: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = row.iter().sum();
        for (c, v) in row.iter_mut().enumerate() {
            probs[[i, c]] = *v / sum;
        }
    }
    PredictionMatrix::new(HORIZON_DAYS, probs, true).unwrap()
}

fn bench_aalen_johansen(c: &mut Criterion) {
    let mut group = c.benchmark_group("aalen_johansen");
    for n in [1000usize, 10_000] {
        let data = cohort(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &data, |b, data| {
            b.iter(|| aalen_johansen(black_box(data), HORIZON_DAYS).unwrap())
        });
    }
    group.finish();
}

fn bench_pseudo_values(c: &mut Criterion) {
    let data = cohort(2000);
    let preds = random_preds(2000);
    c.bench_function("pseudo_values_2000_g20", |b| {
        b.iter(|| pseudo_values(black_box(&data), black_box(&preds), HORIZON_DAYS, 20).unwrap())
    });
}

fn bench_cox(c: &mut Criterion) {
    let data = cohort(5000);
    let (times, status, z) = censoring_dataset(&data);
    c.bench_function("fit_cox_5000", |b| {
        b.iter(|| fit_cox(black_box(&times), black_box(&status), black_box(&z)).unwrap())
    });
}

fn bench_loess(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let n = 5000;
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|v| v + 0.1 * rng.random::<f64>()).collect();
    let w = vec![1.0; n];
    c.bench_function("loess_5000_span075", |b| {
        b.iter(|| loess(black_box(&x), black_box(&y), &w, 0.75, 2).unwrap())
    });
}

fn bench_mlr(c: &mut Criterion) {
    let data = cohort(5000);
    let preds = clamp_predictions(&random_preds(5000), 1e-10);
    let indicators = HorizonIndicators::from_cohort(&data, HORIZON_DAYS);
    let weights = estimated_weights(&data, HORIZON_DAYS, f64::INFINITY).unwrap();
    c.bench_function("mlr_moderate_5000_df4", |b| {
        b.iter(|| mlr_moderate(black_box(&preds), &indicators, &weights, 4).unwrap())
    });
}

fn bench_truth(c: &mut Criterion) {
    let config = DgmConfig::dgm1();
    c.bench_function("true_prob_vector_dgm1", |b| {
        b.iter(|| true_prob_vector(black_box(&config), &[0.7, -0.4], HORIZON_DAYS).unwrap())
    });
}

criterion_group!(
    benches,
    bench_aalen_johansen,
    bench_pseudo_values,
    bench_cox,
    bench_loess,
    bench_mlr,
    bench_truth
);
criterion_main!(benches);
