//! Streams a simulated panel through the detector one period at a time.
//!
//! `cargo run --release --example detect_stream`

use cate_cpd::detector::{Detector, DetectorConfig, Estimator};
use cate_cpd::propensity::PropensityModel;
use cate_cpd::simulate::{generate, Scenario, ScenarioSpec};
use cate_cpd::KernelSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Randomised trial; the effect switches from 0 to x1 after period 50.
    let stream = generate(&ScenarioSpec::benchmark(Scenario::S1, 3, 7))?;

    for estimator in [Estimator::OneK, Estimator::Dk] {
        let config = DetectorConfig::new(3, 4.0, 0.8, PropensityModel::constant(0.5))
            .with_kernel(KernelSpec::gaussian())
            .with_estimator(estimator);
        let mut detector = Detector::new(config)?;
        let mut alert = None;
        for batch in &stream {
            if let Some(a) = detector.push(batch)? {
                alert = Some(a);
                break;
            }
            if batch.t % 10 == 0 {
                if let Some(s) = detector.state().last_statistic() {
                    println!("{estimator:?} t={:>3} statistic={s:.3}", batch.t);
                }
            }
        }
        match alert {
            Some(a) => println!("{estimator:?}: {}", a.to_ndjson()),
            None => println!("{estimator:?}: no alarm"),
        }
    }
    Ok(())
}
