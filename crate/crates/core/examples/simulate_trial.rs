//! Simulate a two-arm trial and print the generator's true effect paths.
//!
//! cargo run --example simulate_trial -- [scenario-id]

use surro::simgen::{analytic_truth, generate_panel, scenario, GenConfig};

fn main() -> surro::Result<()> {
    let id: u8 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let cfg = scenario(id, 1.0, &GenConfig::new(300, 4))?;
    let (panel, truth) = generate_panel(&cfg)?;
    println!(
        "scenario {id}: {} subjects, {} time points, gamma1 {:.4}, gamma2 {:.4}",
        panel.n_subjects(),
        panel.n_times(),
        cfg.gamma1,
        cfg.gamma2
    );
    println!("{:>3} {:>10} {:>10} {:>8} {:>8}", "t", "delta", "delta_r", "lpte", "cpte");
    for t in 0..truth.delta.len() {
        println!(
            "{t:>3} {:>10.5} {:>10.5} {:>8.4} {:>8.4}",
            truth.delta[t], truth.delta_r[t], truth.lpte[t], truth.cpte[t]
        );
    }
    println!("true PTE {:.4}", truth.pte);
    assert_eq!(truth.pte, analytic_truth(&cfg).pte);

    let s0: f64 = panel.arm_members(0).iter().filter_map(|&i| panel.surrogate(i, 4)).sum::<f64>() / 300.0;
    let s1: f64 = panel.arm_members(1).iter().filter_map(|&i| panel.surrogate(i, 4)).sum::<f64>() / 300.0;
    println!("mean surrogate at t=4: control {s0:.4}, treated {s1:.4}");
    Ok(())
}
