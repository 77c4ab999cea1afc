//! Per-time OLS and the endpoint change-score (Diff) estimator next to the
//! state-space estimate, each with intervals from the same resampling streams.

use surro::bootstrap::{bootstrap_panel, BootstrapConfig};
use surro::comparators::{bootstrap_baseline, BaselineMethod};
use surro::estimators::PteConfig;
use surro::simgen::{calibrate, generate_panel, GenConfig, TrajectoryKind};

fn main() -> surro::Result<()> {
    let cfg = calibrate(0.75, TrajectoryKind::Monotone, TrajectoryKind::Monotone, &GenConfig::new(150, 4))?;
    let (panel, truth) = generate_panel(&cfg)?;
    let pc = PteConfig::default();
    let boot = BootstrapConfig { replicates: 300, seed: 8, ..Default::default() };

    let (_, ssm) = bootstrap_panel(&panel, &pc, &boot)?;
    println!("truth {:.4}", truth.pte);
    println!("ssm   {:.4} [{:.4}, {:.4}]", ssm.pte.point, ssm.pte.ci_low, ssm.pte.ci_high);
    for method in [BaselineMethod::Ols, BaselineMethod::Diff] {
        let (r, _) = bootstrap_baseline(method, &panel, &pc.conditional, &boot)?;
        let iv = r.interval.unwrap();
        println!("{:<5} {:.4} [{:.4}, {:.4}]{}", format!("{method:?}").to_lowercase(), r.pte, iv.ci_low, iv.ci_high, if r.flagged { " flagged" } else { "" });
        for n in &r.notes {
            println!("      {n}");
        }
    }
    Ok(())
}
