use mscalib::calibration::{mlr_moderate, HorizonIndicators};
use mscalib::data::clamp_predictions;
use mscalib::dgm::{self, DgmConfig, Scenario, HORIZON_DAYS};
use mscalib::ipcw::estimated_weights;
use mscalib::truth::{self, ReferenceCurve};

fn main() {
    let config = DgmConfig::dgm1().with_scenario(Scenario::Nic);
    for seed in [42u64, 7, 123] {
        let cohort = dgm::simulate_with_config(&config, 20000, seed).unwrap();
        let truths = truth::true_probs(&config, &cohort.covariate_matrix(), HORIZON_DAYS).unwrap();
        let preds = clamp_predictions(&truths.to_prediction_matrix(), 1e-10);
        let estimand = truth::compute_estimand(&preds, &truths).unwrap();
        let indicators = HorizonIndicators::from_cohort(&cohort, HORIZON_DAYS);
        let weights = estimated_weights(&cohort, HORIZON_DAYS, f64::INFINITY).unwrap();
        let results = mlr_moderate(&preds, &indicators, &weights, 4).unwrap();
        for state in [1usize, 5] {
            let reference = ReferenceCurve::from_estimand(&estimand, state);
            let mut rug: Vec<f64> = preds.state_column(state).to_vec();
            rug.sort_by(f64::total_cmp);
            let (qlo, qhi) = (rug[(rug.len()-1)*5/100], rug[(rug.len()-1)*95/100]);
            let mut worst = (0.0f64, 0.0f64);
            for &(x, y) in &results[state-1].points {
                if x >= qlo && x <= qhi {
                    let d = (y - reference.eval(x).0).abs();
                    if d > worst.1 { worst = (x, d); }
                }
            }
            println!("seed {seed} state {state}: band [{qlo:.3},{qhi:.3}] worst dev {:.4} at p={:.3}", worst.1, worst.0);
        }
    }
}
