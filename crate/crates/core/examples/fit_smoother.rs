//! Fit the marginal working model two ways (trajectory-information engine
//! and dense Kalman filter + RTS smoother) and print the treatment path.

use surro::design::{build_marginal, ModelOptions};
use surro::dlm_core::{fit, kalman_filter, kalman_smoother};
use surro::simgen::{calibrate, generate_panel, GenConfig, TrajectoryKind};

fn main() -> surro::Result<()> {
    let cfg = calibrate(0.5, TrajectoryKind::Monotone, TrajectoryKind::Monotone, &GenConfig::new(40, 4))?;
    let (panel, truth) = generate_panel(&cfg)?;
    let spec = build_marginal(&panel, &[], &ModelOptions::default())?;

    let fast = fit(&spec)?;
    let dense = kalman_smoother(&kalman_filter(&spec)?)?;

    println!("states: {:?}", spec.layout.names());
    println!("{:>3} {:>10} {:>10} {:>10}", "t", "truth", "smoothed", "dense");
    for t in 0..panel.n_times() {
        println!(
            "{t:>3} {:>10.5} {:>10.5} {:>10.5}",
            truth.delta[t],
            fast.path("treatment")?[t],
            dense.path("treatment")?[t]
        );
    }
    println!("engine: {:?}, observations used: {}", fast.log.engine, fast.log.n_obs);
    Ok(())
}
