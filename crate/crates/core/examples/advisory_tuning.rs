//! Evaluates the advisory bandwidth and window rates over a few settings.
//! The rates carry unknown constants, so only their relative size matters.
//!
//! `cargo run --example advisory_tuning`

use cate_cpd::calibrate::{
    advisory_bandwidth, advisory_window, advisory_window_raw, ChangeCase, TuningInputs,
};

fn main() {
    let base = TuningInputs {
        sigma: 1.0,
        n: 40.0,
        d: 3,
        w: 3.0,
        delta: 50.0,
        gamma: 20.0,
        gamma_alpha: f64::INFINITY,
        kappa: 1.0,
    };
    println!(
        "{:>4} {:>6} {:>7} {:>10} {:>10} {:>8} {:>3}",
        "d", "n", "gamma", "h(none)", "h(one)", "w raw", "w"
    );
    for (d, n, gamma) in [
        (3, 40.0, 20.0),
        (6, 40.0, 20.0),
        (3, 400.0, 20.0),
        (3, 40.0, 200.0),
    ] {
        let inputs = TuningInputs {
            d,
            n,
            gamma,
            ..base
        };
        println!(
            "{d:>4} {n:>6} {gamma:>7} {:>10.4} {:>10.4} {:>8.3} {:>3}",
            advisory_bandwidth(&inputs, ChangeCase::NoChange, 1.0),
            advisory_bandwidth(&inputs, ChangeCase::OneChange, 1.0),
            advisory_window_raw(&inputs, 1.0),
            advisory_window(&inputs, 1.0),
        );
    }
    let dependent = TuningInputs {
        gamma_alpha: 2.0,
        ..base
    };
    println!(
        "with mixing exponent 2: gamma1={:.2}, h(none)={:.4}",
        dependent.gamma1(),
        advisory_bandwidth(&dependent, ChangeCase::NoChange, 1.0)
    );
}
