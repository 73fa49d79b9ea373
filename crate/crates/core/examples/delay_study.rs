//! A reduced delay study: calibrate each (h, estimator) cell, monitor the
//! same change streams with both estimators and compare their delays.
//!
//! `cargo run --release --example delay_study`

use cate_cpd::calibrate::EpsilonSearch;
use cate_cpd::detector::Estimator;
use cate_cpd::harness::{
    paired_sign_test, run_experiment, summary_markdown, CalibrationSettings, ExperimentConfig,
};
use cate_cpd::simulate::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ExperimentConfig {
        d_list: vec![3],
        gamma_list: vec![40.0],
        reps: 20,
        calibration: CalibrationSettings {
            n_mc: 40,
            horizon: None,
            search: EpsilonSearch::Exact,
        },
        base_seed: 2,
        ..ExperimentConfig::delay_grid(Scenario::S3)
    };
    let summary = run_experiment(&config)?;
    print!("{}", summary_markdown(&summary));

    for &h in &config.h_list {
        let one = summary.find(3, h, 40.0, Estimator::OneK).expect("cell");
        let dk = summary.find(3, h, 40.0, Estimator::Dk).expect("cell");
        let test = paired_sign_test(&one.delays(), &dk.delays());
        println!(
            "h={h}: one-k faster {} times, dk faster {} times, {} ties, {} undefined; p={:.3}",
            test.wins, test.losses, test.ties, test.undefined, test.p_value
        );
    }
    Ok(())
}
