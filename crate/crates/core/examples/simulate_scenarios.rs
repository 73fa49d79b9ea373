//! Generates one panel per benchmark scenario and summarises it.
//!
//! `cargo run --release --example simulate_scenarios`

use cate_cpd::io::{write_stream, RecordFormat};
use cate_cpd::simulate::{generate, Scenario, ScenarioFunctions, ScenarioSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for scenario in [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4] {
        let spec = ScenarioSpec::benchmark(scenario, 3, 0);
        let panel = generate(&spec)?;
        let f = ScenarioFunctions::new(scenario, 3)?;
        let rows: Vec<_> = panel.iter().flat_map(|b| &b.rows).collect();
        let treated = rows.iter().filter(|r| r.treated()).count() as f64 / rows.len() as f64;
        let tau = |post: bool| {
            let sel: Vec<_> = panel
                .iter()
                .filter(|b| (b.t > 50) == post)
                .flat_map(|b| &b.rows)
                .collect();
            sel.iter()
                .map(|r| f.tau(r.t, spec.delta, &r.x))
                .sum::<f64>()
                / sel.len() as f64
        };
        println!(
            "scenario {}: {} rows, treated share {treated:.3}, mean effect {:.3} -> {:.3}",
            u8::from(scenario),
            rows.len(),
            tau(false),
            tau(true),
        );
    }

    // The first two periods of scenario 2 in the NDJSON record format.
    let mut spec = ScenarioSpec::benchmark(Scenario::S2, 2, 0);
    spec.n = 3;
    let panel = generate(&spec)?;
    write_stream(&panel[..2], RecordFormat::Ndjson, std::io::stdout().lock())?;
    Ok(())
}
