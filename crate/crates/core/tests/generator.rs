//! Distributional checks of the trial simulator and its truth oracle.
mod common;

use common::checks;
use surro::simgen::{analytic_truth, calibrate, monte_carlo_truth, scenario, GenConfig, MonteCarloBins, TrajectoryKind};

fn ok(r: Result<String, String>) {
    match r {
        Ok(msg) => println!("{msg}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn log_gamma_innovations_have_mean_zero() {
    ok(checks::log_gamma_mean_zero());
}

#[test]
fn log_gamma_skewness_matches_polygamma_ratio() {
    ok(checks::log_gamma_skewness());
}

#[test]
fn polygamma_series_matches_known_values() {
    // psi'(1) = pi^2/6, psi''(1) = -2 zeta(3)
    let (t1, t2) = checks::trigamma_tetragamma(1.0);
    assert!((t1 - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
    assert!((t2 + 2.0 * 1.202_056_903_159_594_3).abs() < 1e-12);
}

#[test]
fn mixing_scale_has_mean_v() {
    ok(checks::gamma_mixture_mean());
}

#[test]
fn arms_exchangeable_without_effects() {
    ok(checks::null_exchangeability());
}

#[test]
fn ks_detects_a_shift() {
    let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
    let b: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
    assert!(checks::ks_two_sample(&a, &b) < 1e-6);
    assert!(checks::ks_two_sample(&a, &a) > 0.99);
}

#[test]
fn analytic_truth_matches_monte_carlo_on_two_configs() {
    // the full grid lives in the acceptance target
    let base = GenConfig::new(10, 3);
    for c in [scenario(2, 0.75, &base).unwrap(), calibrate(0.5, TrajectoryKind::Monotone, TrajectoryKind::Monotone, &base).unwrap()] {
        let a = analytic_truth(&c);
        let m = monte_carlo_truth(&c, 40_000, MonteCarloBins::default()).unwrap();
        assert!((a.pte - m.pte).abs() < 0.01, "analytic {} vs monte carlo {}", a.pte, m.pte);
    }
}
