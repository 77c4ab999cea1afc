//! A small replicated simulation study: bias, sd, coverage and rejection
//! rate of the validity test for each estimator and target PTE.
//!
//! cargo run --release --example benchmark_study -- [replications]

use surro::comparators::{run_benchmark, BenchmarkConfig};
use surro::simgen::GenConfig;

fn main() -> surro::Result<()> {
    let reps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let mut cfg = BenchmarkConfig::new(GenConfig::new(200, 4));
    cfg.replications = reps;
    cfg.bootstrap.replicates = 200;
    let report = run_benchmark(&cfg)?;
    println!("{:<6} {:>6} {:>6} {:>8} {:>8} {:>7} {:>8} {:>7}", "method", "target", "truth", "mean", "bias", "sd", "coverage", "reject");
    for r in &report.rows {
        println!(
            "{:<6} {:>6.2} {:>6.3} {:>8.4} {:>8.4} {:>7.4} {:>8.3} {:>7.3}",
            format!("{:?}", r.method).to_lowercase(),
            r.target,
            r.true_pte,
            r.mean_pte,
            r.bias,
            r.sd,
            r.coverage,
            r.rejection_rate
        );
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    Ok(())
}
