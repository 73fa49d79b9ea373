//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use cate_cpd::calibrate::{
    calibrate_epsilon, estimate_arl, CalibrationResult, CalibrationSpec, ScenarioSource,
};
use cate_cpd::detector::{
    discrepancy, run_stream, statistic_path, Detector, DetectorConfig, Estimator,
};
use cate_cpd::harness::{
    curve_mse, onek_twok_curves, paired_sign_test, run_experiment, CurveBandwidths,
    ExperimentConfig,
};
use cate_cpd::kernels::{
    dk_cate, nw_cate, transformed_outcome, EstimateWindow, KernelSpec, Scaled,
};
use cate_cpd::model::{Observation, TimeBatch};
use cate_cpd::propensity::{FitMethod, LogisticProblem, PropensityFit, PropensityModel};
use cate_cpd::simulate::{ErrorProcessSpec, Scenario};
use common::{jump_stream, logistic_grid_oracle, oracle_dk, oracle_nw, oracle_statistic, Instance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn s1_config(h: f64) -> DetectorConfig {
    DetectorConfig::new(3, h, f64::INFINITY, PropensityModel::constant(0.5))
}

fn delay_law() -> Verdict {
    let delta = 30;
    let stream = jump_stream(80, delta, 1.0);
    let config = DetectorConfig::new(6, 1.0, 0.5, PropensityModel::constant(0.5));
    let alarm = run_stream(&stream, &config).unwrap().alarm_time();
    verdict(
        alarm == Some(delta + 3),
        format!("alarm at {alarm:?}, expected {}", delta + 3),
    )
}

fn estimator_oracles() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut mismatched_mass = 0;
    for seed in 0..200 {
        let inst = Instance::random(seed);
        let p = inst.propensity();
        let rows = inst.rows();
        let window = EstimateWindow::new(&inst.batches).unwrap();
        let kernel = inst.kernel.spec();
        let model = inst.model();
        for r in &rows {
            let x = &r.x;
            match (
                nw_cate(&window, &model, &kernel, inst.h, x).ok(),
                oracle_nw(&rows, &p, inst.kernel, inst.h, x),
            ) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched_mass += 1,
            }
            match (
                dk_cate(&window, &kernel, inst.h, x).ok(),
                oracle_dk(&rows, inst.kernel, inst.h, x),
            ) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched_mass += 1,
            }
        }
        for estimator in [Estimator::OneK, Estimator::Dk] {
            let config = DetectorConfig::new(inst.w, inst.h, f64::INFINITY, model.clone())
                .with_kernel(kernel)
                .with_estimator(estimator);
            let path = statistic_path(&inst.batches, &config).unwrap();
            let got = *path.values.last().unwrap();
            let want = oracle_statistic(
                &inst.batches,
                inst.w,
                estimator == Estimator::Dk,
                &p,
                inst.kernel,
                inst.h,
            );
            match (got, want) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched_mass += 1,
            }
        }
    }
    verdict(
        worst <= 1e-12 && mismatched_mass == 0,
        format!(
            "max abs deviation {worst:.2e} over 200 instances, {mismatched_mass} mass mismatches"
        ),
    )
}

fn logistic_oracle_rows() -> Vec<(Vec<f64>, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..20)
        .map(|_| {
            let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let eta: f64 = x[0] - 0.5 * x[1];
            let z = u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()));
            (x, z)
        })
        .collect()
}

fn logistic_mle() -> Verdict {
    let rows = logistic_oracle_rows();
    let batch = TimeBatch::new(
        1,
        rows.iter()
            .enumerate()
            .map(|(i, (x, z))| Observation::new(1, i as u64 + 1, 0.0, x.clone(), *z))
            .collect(),
    );
    let fit = LogisticProblem::from_batches(&[batch], false)
        .fit(1e-10, 100)
        .unwrap();
    let oracle = logistic_grid_oracle(&rows);
    let dev = fit
        .beta
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        dev <= 1e-3 && fit.grad_sup_norm <= 1e-8,
        format!(
            "beta {:?} vs grid {:?}: max dev {dev:.1e}, gradient sup-norm {:.1e}",
            fit.beta, oracle, fit.grad_sup_norm
        ),
    )
}

fn arl_control() -> Verdict {
    let source = ScenarioSource {
        scenario: Scenario::S1,
        d: 3,
        n: 40,
        share_errors: false,
    };
    let mut spec = CalibrationSpec::new(20.0, 4);
    spec.propensity = PropensityFit::Pooled {
        method: FitMethod::Constant,
    };
    let cal = calibrate_epsilon(&source, &s1_config(20.0), &spec).unwrap();
    let mut check = spec.clone();
    check.n_mc = 200;
    check.horizon = Some(200);
    check.base_seed = 0x005E_ED0F_F7E5;
    let arl = estimate_arl(&source, &s1_config(20.0).with_epsilon(cal.epsilon), &check).unwrap();
    let bound = 20.0 - 2.0 * arl.standard_error();
    verdict(
        arl.mean >= bound,
        format!(
            "epsilon {:.4}: calibration ARL {:.2}, validation ARL {:.2} (SE {:.2}, {} censored) vs bound {bound:.2}",
            cal.epsilon,
            cal.arl_estimate,
            arl.mean,
            arl.standard_error(),
            arl.censored
        ),
    )
}

fn delay_grid_s1() -> Verdict {
    let mut config = ExperimentConfig::cell(Scenario::S1, 3, 20.0, 20.0);
    config.estimators = vec![Estimator::OneK];
    config.base_seed = 1;
    let summary = run_experiment(&config).unwrap();
    let c = &summary.cells[0];
    let mean = c.mean_delay.unwrap_or(f64::NAN);
    verdict(
        (4.0..=15.0).contains(&mean),
        format!(
            "mean delay {mean:.1} (sd {:.1}), {} detected, {} false alarms, {} missed, epsilon {:.4}",
            c.sd_delay.unwrap_or(f64::NAN),
            c.detected,
            c.false_alarms,
            c.missed,
            c.epsilon
        ),
    )
}

fn paired_superiority() -> Verdict {
    let mut config = ExperimentConfig::cell(Scenario::S3, 3, 4.0, 20.0);
    config.base_seed = 3;
    let summary = run_experiment(&config).unwrap();
    let one = summary.find(3, 4.0, 20.0, Estimator::OneK).unwrap();
    let dk = summary.find(3, 4.0, 20.0, Estimator::Dk).unwrap();
    let test = paired_sign_test(&one.delays(), &dk.delays());
    let (m1, m2) = (
        one.mean_delay.unwrap_or(f64::NAN),
        dk.mean_delay.unwrap_or(f64::NAN),
    );
    verdict(
        m1 < m2 && test.rejects(0.05),
        format!(
            "one-k {m1:.1} ({} FA) vs dk {m2:.1} ({} FA); sign test {}-{} ({} ties), p = {:.3}",
            one.false_alarms, dk.false_alarms, test.wins, test.losses, test.ties, test.p_value
        ),
    )
}

fn onek_vs_twok() -> Verdict {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let rows = onek_twok_curves(
            4000,
            seed,
            CurveBandwidths::default(),
            &KernelSpec::gaussian(),
        )
        .unwrap();
        let (one, two) = curve_mse(&rows);
        wins += usize::from(one < two);
        ratios.push(format!("{:.2}", one / two));
    }
    verdict(
        wins >= 7,
        format!(
            "One-K better in {wins}/10 seeds; MSE ratios [{}]",
            ratios.join(", ")
        ),
    )
}

fn property_suite() -> Verdict {
    let mut failures = Vec::new();

    // Alarm times are non-decreasing in epsilon and agree with the path.
    for seed in 0..8 {
        let stream = cate_cpd::generate(&cate_cpd::ScenarioSpec {
            seed,
            ..cate_cpd::ScenarioSpec::benchmark(Scenario::S1, 2, 0)
        })
        .unwrap();
        let config = DetectorConfig::new(3, 0.5, f64::INFINITY, PropensityModel::constant(0.5));
        let path = statistic_path(&stream, &config).unwrap();
        let mut prev = 0u64;
        for k in 0..40 {
            let eps = 0.05 * k as f64;
            let t = path.first_crossing(eps).unwrap_or(u64::MAX);
            let direct = run_stream(&stream, &config.clone().with_epsilon(eps))
                .unwrap()
                .alarm_time();
            if t < prev || direct.unwrap_or(u64::MAX) != t {
                failures.push(format!("epsilon monotonicity seed {seed} eps {eps}"));
                break;
            }
            prev = t;
        }
    }

    // Multiplying the kernel by a constant leaves every estimate unchanged.
    for seed in 0..50 {
        let inst = Instance::random(1000 + seed);
        let w = inst.w;
        let (older, newer) = inst.batches.split_at(w);
        let (older, newer) = (
            EstimateWindow::new(older).unwrap(),
            EstimateWindow::new(newer).unwrap(),
        );
        let points: Vec<Vec<f64>> = inst.rows().iter().map(|r| r.x.clone()).collect();
        for estimator in [Estimator::OneK, Estimator::Dk] {
            let config =
                DetectorConfig::new(w, inst.h, 1.0, inst.model()).with_estimator(estimator);
            let kernel = inst.kernel.spec();
            let base = discrepancy(&older, &newer, &points, &config, &kernel);
            let scaled = discrepancy(
                &older,
                &newer,
                &points,
                &config,
                &Scaled {
                    factor: 37.5,
                    inner: kernel,
                },
            );
            let ok = match (base, scaled) {
                (Ok(a), Ok(b)) => (a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0),
                (Err(a), Err(b)) => a == b,
                _ => false,
            };
            if !ok {
                failures.push(format!("scale invariance seed {seed}"));
            }
        }
    }

    // Conditional expectation of the transformed outcome equals the effect.
    for i in 1..100 {
        let p = i as f64 / 100.0;
        for (y1, y0) in [(1.0, 0.0), (2.5, -1.0), (-0.3, 0.7), (10.0, 9.0)] {
            let e = p * transformed_outcome(y1, true, p).unwrap()
                + (1.0 - p) * transformed_outcome(y0, false, p).unwrap();
            if (e - (y1 - y0)).abs() > 1e-14 * (1.0 + y1.abs() + y0.abs()) {
                failures.push(format!("transformed outcome p={p}"));
            }
        }
    }

    // Stationary variances of the moving-average errors.
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let innov: Vec<f64> = (0..1_000_010).map(|_| rng.sample(StandardNormal)).collect();
    for (spec, target) in [
        (ErrorProcessSpec::equal_taps(3, 4.0), 0.25),
        (ErrorProcessSpec::equal_taps(4, 8.0), 5.0 / 64.0),
    ] {
        let e = spec.filter(&innov);
        let tail = &e[spec.warmup..spec.warmup + 1_000_000];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (tail.len() - 1) as f64;
        if (var - target).abs() > 0.01 || (spec.stationary_variance() - target).abs() > 1e-15 {
            failures.push(format!("MA variance {var} vs {target}"));
        }
    }

    // Identical results on one thread and on several.
    let run = |threads: usize| -> CalibrationResult {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let source = ScenarioSource {
                scenario: Scenario::S2,
                d: 3,
                n: 40,
                share_errors: false,
            };
            let mut spec = CalibrationSpec::new(10.0, 9);
            spec.n_mc = 24;
            spec.propensity = PropensityFit::Pooled {
                method: FitMethod::Logistic,
            };
            calibrate_epsilon(&source, &s1_config(4.0), &spec).unwrap()
        })
    };
    if run(1) != run(4) {
        failures.push("calibration differs across thread counts".into());
    }
    let detector_run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let stream =
                cate_cpd::generate(&cate_cpd::ScenarioSpec::benchmark(Scenario::S4, 6, 5)).unwrap();
            let mut det = Detector::new(DetectorConfig::new(
                7,
                0.3,
                f64::INFINITY,
                PropensityModel::constant(0.5),
            ))
            .unwrap();
            stream
                .iter()
                .map(|b| {
                    det.push(b).unwrap();
                    det.state().last_statistic()
                })
                .collect::<Vec<_>>()
        })
    };
    if detector_run(1) != detector_run(4) {
        failures.push("statistic path differs across thread counts".into());
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "epsilon monotonicity, kernel scale invariance, transformed-outcome identity, MA variances, thread determinism".to_string()
        } else {
            failures.join("; ")
        },
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 8] = [
        ("deterministic delay law", delay_law),
        ("estimator oracle equivalence", estimator_oracles),
        ("logistic MLE vs grid oracle", logistic_mle),
        ("ARL control after calibration", arl_control),
        ("Scenario 1 mean delay", delay_grid_s1),
        ("paired superiority in Scenario 3", paired_superiority),
        ("One-K vs Two-K MSE", onek_vs_twok),
        ("property suites", property_suite),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "criterion {} [{}]: {} ({:.1}s) {}",
            i + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
