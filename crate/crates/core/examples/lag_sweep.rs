//! PTE against the number of conditioned surrogate lags K, on a trial where
//! the surrogate keeps acting on the outcome one step later.

use surro::estimators::{analyze, PteConfig};
use surro::simgen::{calibrate, generate_panel, GenConfig, TrajectoryKind};

fn main() -> surro::Result<()> {
    let mut base = GenConfig::new(300, 4);
    base.beta = vec![5.0, 2.5];
    let cfg = calibrate(0.75, TrajectoryKind::Monotone, TrajectoryKind::Monotone, &base)?;
    let (panel, truth) = generate_panel(&cfg)?;
    println!("true PTE {:.4}", truth.pte);
    for k in 0..=3 {
        let mut pc = PteConfig::default();
        pc.conditional.max_lag = k;
        let r = analyze(&panel, &pc)?.result;
        println!("K = {k}: PTE {:.4}  CPTE {:?}", r.pte, r.cpte.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    }
    Ok(())
}
