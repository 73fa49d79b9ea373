//! Calibrates the alarm threshold to a target average run length and checks
//! it on fresh Monte-Carlo replications.
//!
//! `cargo run --release --example calibrate_threshold`

use cate_cpd::calibrate::{calibrate_epsilon, estimate_arl, CalibrationSpec, ScenarioSource};
use cate_cpd::detector::{DetectorConfig, Estimator};
use cate_cpd::propensity::{FitMethod, PropensityFit, PropensityModel};
use cate_cpd::simulate::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let source = ScenarioSource {
        scenario: Scenario::S1,
        d: 3,
        n: 40,
        share_errors: false,
    };
    let spec = CalibrationSpec {
        n_mc: 50,
        propensity: PropensityFit::Pooled {
            method: FitMethod::Constant,
        },
        ..CalibrationSpec::new(20.0, 11)
    };

    for estimator in [Estimator::OneK, Estimator::Dk] {
        let config = DetectorConfig::new(3, 4.0, f64::INFINITY, PropensityModel::constant(0.5))
            .with_estimator(estimator);
        let result = calibrate_epsilon(&source, &config, &spec)?;
        println!(
            "{estimator:?}: epsilon={:.4} ARL={:.2} (sd {:.2}, {} censored)",
            result.epsilon, result.arl_estimate, result.sd, result.censored
        );

        let fresh = CalibrationSpec {
            base_seed: 99,
            ..spec.clone()
        };
        let check = estimate_arl(&source, &config.with_epsilon(result.epsilon), &fresh)?;
        println!(
            "  fresh seeds: ARL={:.2} +- {:.2}{}",
            check.mean,
            check.standard_error(),
            if check.is_lower_bound() {
                " (lower bound)"
            } else {
                ""
            }
        );
    }
    Ok(())
}
