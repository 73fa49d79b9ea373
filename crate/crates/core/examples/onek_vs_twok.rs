//! One-K versus Two-K estimation on a single cross-section whose baseline
//! oscillates quickly while the effect is smooth.
//!
//! `cargo run --release --example onek_vs_twok [-- --cv]`

use cate_cpd::harness::{curve_mse, onek_twok_curves, CurveBandwidths};
use cate_cpd::KernelSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kernel = KernelSpec::gaussian();
    let bandwidths = if std::env::args().any(|a| a == "--cv") {
        let candidates = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2];
        let bw = CurveBandwidths::cross_validated(4000, 0, &candidates, &kernel)?;
        println!("cross-validated bandwidths: {bw:?}");
        bw
    } else {
        CurveBandwidths::default()
    };

    let rows = onek_twok_curves(4000, 0, bandwidths, &kernel)?;
    let (one, two) = curve_mse(&rows);
    println!("MSE  one-k {one:.4}  two-k {two:.4}");

    println!("{:>6} {:>8} {:>8} {:>8}", "x", "tau", "one-k", "two-k");
    for r in rows.iter().step_by(64) {
        println!(
            "{:>6.3} {:>8.3} {:>8.3} {:>8.3}",
            r.x, r.true_tau, r.one_k, r.two_k
        );
    }
    Ok(())
}
