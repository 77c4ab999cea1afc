//! Point estimates of Delta, Delta_R, LPTE, CPTE and PTE, plus the
//! surrogate dominance diagnostic.

use surro::estimators::{analyze, check_surrogate_dominance, PteConfig};
use surro::simgen::{calibrate, generate_panel, GenConfig, TrajectoryKind};

fn main() -> surro::Result<()> {
    let cfg = calibrate(0.75, TrajectoryKind::Monotone, TrajectoryKind::Monotone, &GenConfig::new(300, 4))?;
    let (panel, truth) = generate_panel(&cfg)?;

    let mut pc = PteConfig::default();
    pc.conditional.max_lag = 1;
    let a = analyze(&panel, &pc)?;
    let r = &a.result;

    println!("{:>3} {:>10} {:>10} {:>8} {:>8}", "t", "delta", "delta_r", "lpte", "cpte");
    for t in 0..r.delta.len() {
        println!(
            "{t:>3} {:>10.5} {:>10.5} {:>8.4} {:>8.4}{}",
            r.delta.values[t],
            r.delta_r.values[t],
            r.lpte[t],
            r.cpte[t],
            if r.lpte_flagged[t] { "  (denominator near 0)" } else { "" }
        );
    }
    println!("PTE {:.4} (truth {:.4})", r.pte, truth.pte);

    let dom = check_surrogate_dominance(&panel);
    let flagged: Vec<usize> = dom.rows.iter().filter(|r| r.flagged).map(|r| r.t).collect();
    println!("dominance flags at t = {flagged:?}; {}", dom.note);
    Ok(())
}
