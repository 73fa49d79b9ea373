use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cate_cpd::calibrate::{
    advisory_bandwidth, advisory_window, advisory_window_raw, calibrate_epsilon, CalibrationSpec,
    ChangeCase, EpsilonSearch, ScenarioSource, TuningInputs,
};
use cate_cpd::detector::{DetectorConfig, Estimator};
use cate_cpd::harness::{
    onek_twok_curves, run_experiment, summary_markdown, write_curves_csv, write_outputs,
    CurveBandwidths, ExperimentConfig,
};
use cate_cpd::io::{csv_rows, ndjson_rows, write_stream, Batcher, RecordFormat};
use cate_cpd::kernels::KernelSpec;
use cate_cpd::monitor::{monitor, MonitorSpec};
use cate_cpd::propensity::{FitMethod, PropensityFit, PropensityModel};
use cate_cpd::simulate::{generate, Scenario, ScenarioSpec};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(
    name = "cate-cpd",
    version,
    about = "Online change-point detection for conditional average treatment effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated scenario stream
    Simulate(SimulateArgs),
    /// Monitor a stream from standard input and print alerts as NDJSON
    Detect(DetectArgs),
    /// Calibrate the threshold to a target average run length
    Calibrate(CalibrateArgs),
    /// Run a delay study from a JSON configuration
    Experiment(ExperimentArgs),
    /// Write One-K and Two-K estimation curves as CSV
    Curves(CurvesArgs),
    /// Evaluate the advisory bandwidth and window formulas
    Tune(TuneArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON scenario spec; flags are ignored when given
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Last pre-change period
    #[arg(long, default_value_t = 50)]
    delta: u64,
    /// Generate change-free data
    #[arg(long)]
    no_change: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    share_errors: bool,
    #[arg(long, default_value = "ndjson")]
    format: RecordFormat,
    /// Output file (standard output by default)
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// JSON detector configuration; without a propensity model one is fitted on a burn-in prefix
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "ndjson")]
    format: RecordFormat,
    /// Override the burn-in length (default 2w)
    #[arg(long)]
    burn_in: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value_t = 3)]
    w: usize,
    #[arg(long)]
    h: f64,
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    n_mc: usize,
    /// Run length cap (default 10 * gamma)
    #[arg(long)]
    horizon: Option<usize>,
    /// Comma-separated threshold grid; exact search when omitted
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Bisection bracket and tolerance as lo,hi,tol
    #[arg(long, value_delimiter = ',', num_args = 3, conflicts_with = "grid")]
    bisect: Option<Vec<f64>>,
    #[arg(long, default_value = "one-k")]
    estimator: Estimator,
    /// Propensity model: known, pooled-constant, pooled-logistic, burn-in-logistic
    #[arg(long, default_value = "pooled")]
    propensity: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Write summary.csv, summary.md, summary.json and reps.ndjson here
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = CurveBandwidths::default().one_k)]
    h_one_k: f64,
    #[arg(long, default_value_t = CurveBandwidths::default().treated)]
    h_treated: f64,
    #[arg(long, default_value_t = CurveBandwidths::default().control)]
    h_control: f64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long)]
    n: f64,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 3.0)]
    w: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    gamma: f64,
    /// Mixing exponent; `inf` for independent data
    #[arg(long, default_value_t = f64::INFINITY)]
    gamma_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    #[arg(long, default_value_t = 1.0)]
    c_h: f64,
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec = match &args.config {
        Some(p) => read_json(p)?,
        None => ScenarioSpec {
            scenario: Scenario::try_from(args.scenario)?,
            d: args.d,
            horizon: args.horizon,
            n: args.n,
            delta: (!args.no_change).then_some(args.delta),
            seed: args.seed,
            share_errors: args.share_errors,
        },
    };
    let batches = generate(&spec)?;
    write_stream(&batches, args.format, output(args.out.as_deref())?)?;
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let mut spec: MonitorSpec = read_json(&args.config)?;
    if args.burn_in.is_some() {
        spec.burn_in = args.burn_in;
    }
    let stdin = io::stdin().lock();
    let report = match args.format {
        RecordFormat::Ndjson => monitor(Batcher::new(ndjson_rows(stdin)), &spec)?,
        RecordFormat::Csv => monitor(Batcher::new(csv_rows(stdin)?), &spec)?,
    };
    if let Some(alert) = report.alert {
        let mut out = io::stdout().lock();
        writeln!(out, "{}", alert.to_ndjson())?;
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let scenario = Scenario::try_from(args.scenario)?;
    let (model, wiring) = match args.propensity.as_str() {
        "known" if scenario.randomised() => {
            (PropensityModel::constant(0.5), PropensityFit::AsConfigured)
        }
        "known" => return Err("a known propensity is only available for scenarios 1 and 3".into()),
        "pooled" => (
            PropensityModel::constant(0.5),
            cate_cpd::harness::default_propensity_fit(scenario),
        ),
        "pooled-constant" => (
            PropensityModel::constant(0.5),
            PropensityFit::Pooled {
                method: FitMethod::Constant,
            },
        ),
        "pooled-logistic" => (
            PropensityModel::constant(0.5),
            PropensityFit::Pooled {
                method: FitMethod::Logistic,
            },
        ),
        "burn-in-logistic" => (
            PropensityModel::constant(0.5),
            PropensityFit::BurnIn {
                method: FitMethod::Logistic,
                periods: None,
            },
        ),
        other => return Err(format!("unknown propensity wiring `{other}`").into()),
    };
    let search = match (args.grid, args.bisect) {
        (Some(values), _) => EpsilonSearch::Grid { values },
        (None, Some(b)) => EpsilonSearch::Bisection {
            lo: b[0],
            hi: b[1],
            tol: b[2],
        },
        (None, None) => EpsilonSearch::Exact,
    };
    let spec = CalibrationSpec {
        gamma: args.gamma,
        n_mc: args.n_mc,
        horizon: args.horizon,
        search,
        base_seed: args.seed,
        propensity: wiring,
    };
    let source = ScenarioSource {
        scenario,
        d: args.d,
        n: args.n,
        share_errors: false,
    };
    let config = DetectorConfig::new(args.w, args.h, f64::INFINITY, model)
        .with_kernel(KernelSpec::gaussian())
        .with_estimator(args.estimator);
    let result = calibrate_epsilon(&source, &config, &spec)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let mut config: ExperimentConfig = read_json(&args.config)?;
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        config.outputs.csv = Some(dir.join("summary.csv"));
        config.outputs.markdown = Some(dir.join("summary.md"));
        config.outputs.json = Some(dir.join("summary.json"));
        config.outputs.log = Some(dir.join("reps.ndjson"));
    }
    let summary = run_experiment(&config)?;
    write_outputs(&summary, &config.outputs)?;
    print!("{}", summary_markdown(&summary));
    Ok(())
}

fn curves(args: CurvesArgs) -> Result<()> {
    let bandwidths = CurveBandwidths {
        one_k: args.h_one_k,
        treated: args.h_treated,
        control: args.h_control,
    };
    let rows = onek_twok_curves(args.n, args.seed, bandwidths, &KernelSpec::gaussian())?;
    write_curves_csv(&rows, output(args.out.as_deref())?)?;
    Ok(())
}

fn tune(args: TuneArgs) -> Result<()> {
    let inputs = TuningInputs {
        sigma: args.sigma,
        n: args.n,
        d: args.d,
        w: args.w,
        delta: args.delta,
        gamma: args.gamma,
        gamma_alpha: args.gamma_alpha,
        kappa: args.kappa,
    };
    let report = serde_json::json!({
        "h_no_change": advisory_bandwidth(&inputs, ChangeCase::NoChange, args.c_h),
        "h_one_change": advisory_bandwidth(&inputs, ChangeCase::OneChange, args.c_h),
        "w_raw": advisory_window_raw(&inputs, args.c1),
        "w": advisory_window(&inputs, args.c1),
    });
    println!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Detect(a) => detect(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Experiment(a) => experiment(a),
        Command::Curves(a) => curves(a),
        Command::Tune(a) => tune(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
