use std::io::Write;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_cate-cpd");

fn run(args: &[&str], stdin: Option<&[u8]>) -> Output {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut input = child.stdin.take().unwrap();
    if let Some(bytes) = stdin {
        // `detect` stops reading at the first alarm, so a broken pipe is fine.
        let _ = input.write_all(bytes);
    }
    drop(input);
    child.wait_with_output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn simulate_then_detect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s1.csv");
    let sim = run(
        &[
            "simulate",
            "--scenario",
            "1",
            "--d",
            "2",
            "--n",
            "30",
            "--seed",
            "3",
            "--format",
            "csv",
            "--out",
        ],
        None,
    );
    // `--out` without a value is a usage error.
    assert!(!sim.status.success());
    stdout(&run(
        &[
            "simulate",
            "--scenario",
            "1",
            "--d",
            "2",
            "--n",
            "30",
            "--seed",
            "3",
            "--format",
            "csv",
            "--out",
            data.to_str().unwrap(),
        ],
        None,
    ));
    let csv = std::fs::read(&data).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 1 + 100 * 30);

    let config = dir.path().join("detector.json");
    std::fs::write(
        &config,
        r#"{"w": 3, "h": 1.0, "epsilon": 0.5, "fit": "constant"}"#,
    )
    .unwrap();
    let out = stdout(&run(
        &[
            "detect",
            "--config",
            config.to_str().unwrap(),
            "--format",
            "csv",
        ],
        Some(&csv),
    ));
    let alert: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let t = alert["delta_hat"].as_u64().unwrap();
    // Burn-in consumes 6 periods, so the first statistic is at 12.
    assert!((12..=100).contains(&t), "{alert}");
}

#[test]
fn calibrate_prints_json() {
    let out = stdout(&run(
        &[
            "calibrate",
            "--gamma",
            "8",
            "--w",
            "2",
            "--h",
            "1",
            "--scenario",
            "1",
            "--d",
            "2",
            "--n",
            "10",
            "--n-mc",
            "10",
            "--propensity",
            "known",
            "--seed",
            "1",
        ],
        None,
    ));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(v["arl_estimate"].as_f64().unwrap() >= 8.0);
    assert_eq!(v["seeds"].as_array().unwrap().len(), 10);

    let bad = run(
        &[
            "calibrate",
            "--gamma",
            "8",
            "--h",
            "1",
            "--scenario",
            "2",
            "--propensity",
            "known",
        ],
        None,
    );
    assert!(!bad.status.success());
}

#[test]
fn experiment_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    std::fs::write(
        &config,
        r#"{"scenario": 3, "horizon": 30, "n": 8, "delta": 15, "d_list": [2], "h_list": [1.0],
            "gamma_list": [6.0], "w": 2, "reps": 3, "calibration": {"n_mc": 10}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let md = stdout(&run(
        &[
            "experiment",
            "--config",
            config.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ],
        None,
    ));
    assert!(md.contains('|'));
    for f in ["summary.csv", "summary.md", "summary.json", "reps.ndjson"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn curves_and_tune() {
    let csv = stdout(&run(
        &[
            "curves",
            "--n",
            "200",
            "--h-treated",
            "0.02",
            "--h-control",
            "0.02",
        ],
        None,
    ));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "x,true_tau,one_k,two_k");
    assert_eq!(lines.count(), 512);

    let tune = stdout(&run(
        &[
            "tune", "--n", "40", "--d", "3", "--delta", "50", "--gamma", "20",
        ],
        None,
    ));
    let v: serde_json::Value = serde_json::from_str(tune.trim()).unwrap();
    assert!(v["h_no_change"].as_f64().unwrap() > 0.0);
    assert!(v["w"].as_u64().unwrap() >= 1);
}
