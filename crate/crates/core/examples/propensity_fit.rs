//! Fits constant and logistic propensity models to an observational panel
//! and compares them with the true propensity.
//!
//! `cargo run --release --example propensity_fit`

use cate_cpd::propensity::{fit_constant, fit_logistic, LogisticOptions, DEFAULT_CLIP};
use cate_cpd::simulate::{generate, Scenario, ScenarioFunctions, ScenarioSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ScenarioSpec::benchmark(Scenario::S4, 3, 1).without_change();
    let panel = generate(&spec)?;
    let truth = ScenarioFunctions::new(Scenario::S4, 3)?;

    let constant = fit_constant(&panel, DEFAULT_CLIP)?;
    let logistic = fit_logistic(&panel, LogisticOptions::default())?;
    let with_intercept = fit_logistic(
        &panel,
        LogisticOptions {
            with_intercept: true,
            ..LogisticOptions::default()
        },
    )?;
    println!("logistic:       {}", logistic.to_json()?);
    println!("with intercept: {}", with_intercept.to_json()?);

    println!(
        "{:>18} {:>7} {:>8} {:>9} {:>9}",
        "x", "true", "constant", "logistic", "intercept"
    );
    for x in [
        [0.1, 0.9, 0.1],
        [0.5, 0.5, 0.5],
        [0.9, 0.1, 0.9],
        [0.2, 0.6, 0.7],
    ] {
        println!(
            "{:>18} {:>7.3} {:>8.3} {:>9.3} {:>9.3}",
            format!("{x:?}"),
            truth.propensity(&x),
            constant.predict(&x)?,
            logistic.predict(&x)?,
            with_intercept.predict(&x)?,
        );
    }
    Ok(())
}
