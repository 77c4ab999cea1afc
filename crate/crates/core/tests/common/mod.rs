//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surro::design::{FrozenEvolution, ModelSpec, Panel, Subject, SubjectSeries};

/// Posterior mean of the shared block at every t, from the explicitly
/// materialised joint prior covariance of all states at all times and the
/// stacked observation model: E[x | y] = S H' (H S H' + R)^{-1} y.
pub fn gls_shared_means(spec: &ModelSpec, evo: &FrozenEvolution) -> Vec<DVector<f64>> {
    let s = spec.layout.shared_dim();
    let n = spec.n_subjects();
    let nt = spec.n_times();
    let p = s + n;
    let dim = p * nt;
    let pos = |t: usize, k: usize| t * p + k;
    let mpos: Vec<Option<usize>> = (0..s).map(|k| evo.moving.iter().position(|&m| m == k)).collect();
    let mut cov = DMatrix::zeros(dim, dim);
    for t in 0..nt {
        for u in 0..nt {
            let lo = t.min(u);
            for a in 0..s {
                for b in 0..s {
                    let mut v = if a == b { spec.prior.shared_var[a] } else { 0.0 };
                    if let (Some(ma), Some(mb)) = (mpos[a], mpos[b]) {
                        for k in 1..=lo {
                            v += evo.shared_w[k][(ma, mb)];
                        }
                    }
                    cov[(pos(t, a), pos(u, b))] = v;
                }
            }
            for i in 0..n {
                let mut v = spec.prior.level_var;
                for k in 1..=lo {
                    v += evo.level_w[i][k];
                }
                cov[(pos(t, s + i), pos(u, s + i))] = v;
            }
        }
    }
    let rows = spec.rows();
    let m = rows.len();
    let mut h = DMatrix::zeros(m, dim);
    let mut y = DVector::zeros(m);
    let mut r = DMatrix::zeros(m, m);
    for (j, row) in rows.iter().enumerate() {
        for (k, x) in row.x.iter().enumerate() {
            h[(j, pos(row.t, k))] = *x;
        }
        h[(j, pos(row.t, s + row.subject))] = 1.0;
        y[j] = row.y;
        r[(j, j)] = spec.obs_var(row.subject);
    }
    let sh = &cov * h.transpose();
    let f = &h * &sh + r;
    let sol = f.lu().solve(&y).expect("GLS normal equations");
    let mean = sh * sol;
    (0..nt).map(|t| DVector::from_iterator(s, (0..s).map(|k| mean[pos(t, k)]))).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Random small panel with optional missing cells.
pub fn random_panel(seed: u64, n: usize, n_times: usize, missing: f64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = (0..n)
        .map(|i| {
            let arm = (i % 2) as u8;
            let base: f64 = rng.random_range(-1.0..1.0);
            let mut outcome = Vec::new();
            let mut surrogate = Vec::new();
            let mut lvl = base;
            for t in 0..n_times {
                lvl += rng.random_range(-0.3..0.3);
                let s = lvl + 0.4 * arm as f64 * t as f64 + rng.random_range(-0.2..0.2);
                let yv = 1.5 * s + 0.3 * arm as f64 + rng.random_range(-0.5..0.5);
                let keep = t == 0 || rng.random::<f64>() >= missing;
                outcome.push(if keep { Some(yv) } else { None });
                surrogate.push(Some(s));
            }
            SubjectSeries {
                subject: Subject { id: format!("s{i:02}"), arm, covariates: vec![rng.random_range(0.0..1.0)] },
                outcome,
                surrogate,
            }
        })
        .collect();
    Panel::new(vec!["age".into()], n_times, series).unwrap()
}
pub mod props;
pub mod checks;
