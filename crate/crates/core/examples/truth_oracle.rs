//! The generator's analytic truth against a brute-force Monte Carlo
//! conditional-expectation oracle, for the five homogeneity scenarios.

use surro::simgen::{analytic_truth, monte_carlo_truth, scenario, GenConfig, MonteCarloBins};

fn main() -> surro::Result<()> {
    let base = GenConfig::new(10, 3);
    for id in 1..=5u8 {
        let c = scenario(id, 0.75, &base)?;
        let a = analytic_truth(&c);
        let m = monte_carlo_truth(&c, 100_000, MonteCarloBins::default())?;
        println!("scenario {id}: analytic PTE {:.4}, Monte Carlo {:.4}, diff {:+.4}", a.pte, m.pte, a.pte - m.pte);
    }
    Ok(())
}
