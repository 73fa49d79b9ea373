use cate_cpd::propensity::{fit_logistic, LogisticOptions, LogisticProblem, PropensityKind};
use cate_cpd::simulate::{derive_seed, generate, Scenario, ScenarioSpec};

#[test]
fn pooled_fits_converge_on_scenario_panels() {
    for scenario in [Scenario::S2, Scenario::S4] {
        for r in 0..24 {
            let spec = ScenarioSpec {
                horizon: 100,
                delta: None,
                ..ScenarioSpec::benchmark(scenario, 3, derive_seed(9, &[r]))
            };
            let panel = generate(&spec).unwrap();
            let fit = LogisticProblem::from_batches(&panel, false)
                .fit(1e-8, 100)
                .unwrap();
            assert!(fit.grad_sup_norm <= 1e-8);
            assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        }
    }
}

#[test]
fn scenario_two_slopes_are_negative_in_the_first_covariate() {
    // Treatment probability falls from 0.61 at x1 = 0.2 to 0 at x1 = 1, so a
    // no-intercept logistic fit puts a negative weight on x1.
    let panel = generate(&ScenarioSpec::benchmark(Scenario::S2, 3, 11)).unwrap();
    let model = fit_logistic(&panel, LogisticOptions::default()).unwrap();
    match model.kind() {
        PropensityKind::Logistic { beta, .. } => assert!(beta[0] < 0.0, "{beta:?}"),
        _ => unreachable!(),
    }
}
