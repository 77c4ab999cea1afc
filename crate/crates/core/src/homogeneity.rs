//! Temporal homogeneity of the PTE.
//!
//! Under a constant LPTE equal to tau, Delta_diff(t) = Delta_R(t) -
//! (1 - tau) Delta(t) vanishes at every t. The MSD test takes the largest
//! standardised |Delta_diff(t)| and calibrates it by simulating the stacked
//! (Delta_R, Delta) vector from a Gaussian centred on the null with the
//! bootstrap covariance. The Wald comparator uses a quadratic form on the
//! sum-to-zero subspace.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::bootstrap::BootstrapDraws;
use crate::estimators::EffectPath;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_NULL_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffPath {
    pub values: Vec<f64>,
    pub tau_hat: f64,
    /// Point estimate of Delta used to centre the null.
    pub delta_hat: Vec<f64>,
    /// Bootstrap SD of Delta_R(t) - (1 - tau_hat) Delta(t), tau_hat fixed.
    pub sigma: Vec<f64>,
}

fn tau_of(delta_r: &[f64], delta: &[f64]) -> f64 {
    1.0 - delta_r.iter().sum::<f64>() / delta.iter().sum::<f64>()
}

/// Delta_diff path with tau_hat = CPTE(T) and per-t bootstrap SDs.
pub fn delta_diff(delta_r: &EffectPath, delta: &EffectPath, draws: &BootstrapDraws) -> Result<DiffPath> {
    let n = delta.len();
    if delta_r.len() != n || n == 0 {
        return Err(Error::config("delta and delta_R paths differ in length"));
    }
    if draws.delta.len() < 2 || draws.delta.iter().chain(&draws.delta_r).any(|d| d.len() != n) {
        return Err(Error::config("bootstrap draws missing or of the wrong length"));
    }
    let tau = tau_of(&delta_r.values, &delta.values);
    if !tau.is_finite() {
        return Err(Error::numerical("tau_hat undefined: total treatment effect is zero"));
    }
    let values: Vec<f64> = (0..n).map(|t| delta_r.values[t] - (1.0 - tau) * delta.values[t]).collect();
    let mut sigma = Vec::with_capacity(n);
    for t in 0..n {
        let d: Vec<f64> = draws.delta.iter().zip(&draws.delta_r).map(|(a, r)| r[t] - (1.0 - tau) * a[t]).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::numerical(format!("degenerate bootstrap variance of Delta_diff at t={t}")));
        }
        sigma.push(sd);
    }
    Ok(DiffPath { values, tau_hat: tau, delta_hat: delta.values.clone(), sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Msd,
    Wald,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    /// Null draws (MSD) or degrees of freedom (Wald).
    pub draws_used: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    /// Re-estimate tau inside every null draw.
    Reestimate,
    /// Keep tau at its point estimate.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdConfig {
    pub alpha: f64,
    pub n_null_draws: usize,
    pub seed: u64,
    pub tau_mode: TauMode,
}

impl Default for MsdConfig {
    fn default() -> Self {
        MsdConfig { alpha: 0.05, n_null_draws: DEFAULT_NULL_DRAWS, seed: 1, tau_mode: TauMode::Reestimate }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha must lie in (0, 1)"));
    }
    Ok(())
}

/// Max standardised deviation of a diff path.
pub fn msd_statistic(values: &[f64], sigma: &[f64]) -> f64 {
    values.iter().zip(sigma).map(|(v, s)| (v / s).abs()).fold(0.0, f64::max)
}

/// Square root of a PSD matrix by eigendecomposition (negative eigenvalues
/// clipped). Also reports whether the matrix was numerically rank deficient.
fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let mut s = m.clone();
    linalg::symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let deficient = eig.eigenvalues.iter().any(|&e| e <= 1e-12 * top);
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&e| e.max(0.0).sqrt()));
    (&eig.eigenvectors * DMatrix::from_diagonal(&d), deficient)
}

/// Sorted null statistics give critical value s_(M - ceil(alpha M) + 1) and
/// p = #{s >= stat} / M, so that reject <=> stat > c <=> p < alpha.
fn calibrate(stat: f64, mut null: Vec<f64>, alpha: f64) -> (f64, f64, bool) {
    null.sort_by(|a, b| a.total_cmp(b));
    let m = null.len();
    let k = ((alpha * m as f64).ceil() as usize).clamp(1, m);
    let c = null[m - k];
    let p = null.iter().filter(|&&s| s >= stat).count() as f64 / m as f64;
    (c, p, stat > c)
}

/// Maximum standardised deviation test with simulated critical value.
pub fn msd_test(diff: &DiffPath, draws: &BootstrapDraws, config: &MsdConfig) -> Result<TestResult> {
    check_alpha(config.alpha)?;
    if config.n_null_draws == 0 {
        return Err(Error::config("need at least one null draw"));
    }
    let n = diff.values.len();
    let b = draws.delta.len();
    let mut warnings = Vec::new();
    if b < 10 * n {
        warnings.push(format!("{b} bootstrap draws for {n} time points; at least {} recommended", 10 * n));
    }
    let stacked: Vec<Vec<f64>> =
        draws.delta_r.iter().zip(&draws.delta).map(|(r, d)| r.iter().chain(d).copied().collect()).collect();
    let cov = linalg::sample_covariance(&stacked);
    let (root, deficient) = psd_sqrt(&cov);
    if deficient {
        warnings.push("bootstrap covariance is rank deficient; null draws use its PSD square root".into());
    }
    let tau = diff.tau_hat;
    let delta_hat = &diff.delta_hat;
    let mut centre = DVector::zeros(2 * n);
    for t in 0..n {
        centre[t] = (1.0 - tau) * delta_hat[t];
        centre[n + t] = delta_hat[t];
    }
    let stat = msd_statistic(&diff.values, &diff.sigma);
    let null: Vec<f64> = (0..config.n_null_draws as u64)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            rng.set_stream(j);
            let e = DVector::from_iterator(2 * n, (0..2 * n).map(|_| StandardNormal.sample(&mut rng)));
            let z = &centre + &root * e;
            let (r, d) = (&z.as_slice()[..n], &z.as_slice()[n..]);
            let tj = match config.tau_mode {
                TauMode::Reestimate => tau_of(r, d),
                TauMode::Fixed => tau,
            };
            let v: Vec<f64> = (0..n).map(|t| r[t] - (1.0 - tj) * d[t]).collect();
            msd_statistic(&v, &diff.sigma)
        })
        .collect();
    let (c, p, reject) = calibrate(stat, null, config.alpha);
    Ok(TestResult {
        method: TestMethod::Msd,
        statistic: stat,
        critical_value: c,
        p_value: p,
        alpha: config.alpha,
        reject,
        draws_used: config.n_null_draws,
        warnings,
    })
}

/// Orthonormal basis (n x (n-1)) of the vectors summing to zero.
pub fn sum_to_zero_basis(n: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(n, n.saturating_sub(1));
    for k in 1..n {
        // Helmert contrast k: (1, ..., 1, -k, 0, ...) / sqrt(k (k + 1))
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            u[(i, k - 1)] = 1.0 / norm;
        }
        u[(k, k - 1)] = -(k as f64) / norm;
    }
    u
}

/// d' S+ d with the pseudo-inverse taken on the sum-to-zero subspace.
pub fn wald_statistic(d: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    let n = d.len();
    if n < 2 {
        return Ok(0.0);
    }
    let u = sum_to_zero_basis(n);
    let proj = u.transpose() * DVector::from_column_slice(d);
    let s = u.transpose() * sigma * &u;
    let chol = nalgebra::Cholesky::new(s.clone())
        .ok_or_else(|| Error::numerical("Delta_diff covariance is singular on the sum-to-zero subspace; use the MSD test"))?;
    let eig = s.symmetric_eigen();
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e)));
    if lo <= 1e-12 * hi {
        return Err(Error::numerical("Delta_diff covariance is numerically singular; use the MSD test"));
    }
    Ok(proj.dot(&chol.solve(&proj)))
}

/// Wald comparator, chi-squared reference with df = number of times - 1.
pub fn wald_test(diff: &DiffPath, draws: &BootstrapDraws, alpha: f64) -> Result<TestResult> {
    check_alpha(alpha)?;
    let n = diff.values.len();
    let df = n.saturating_sub(1);
    if df == 0 {
        return Ok(TestResult {
            method: TestMethod::Wald,
            statistic: 0.0,
            critical_value: f64::INFINITY,
            p_value: 1.0,
            alpha,
            reject: false,
            draws_used: 0,
            warnings: vec!["single time point: homogeneity is vacuous".into()],
        });
    }
    let tau = diff.tau_hat;
    let dd: Vec<Vec<f64>> = draws
        .delta_r
        .iter()
        .zip(&draws.delta)
        .map(|(r, d)| (0..n).map(|t| r[t] - (1.0 - tau) * d[t]).collect())
        .collect();
    let sigma = linalg::sample_covariance(&dd);
    let stat = wald_statistic(&diff.values, &sigma)?;
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::numerical(e.to_string()))?;
    let p = (1.0 - chi.cdf(stat)).clamp(0.0, 1.0);
    let c = chi.inverse_cdf(1.0 - alpha);
    Ok(TestResult {
        method: TestMethod::Wald,
        statistic: stat,
        critical_value: c,
        p_value: p,
        alpha,
        reject: p < alpha,
        draws_used: df,
        warnings: vec![
            "the Wald comparator is anti-conservative for long follow-up; prefer the MSD test".into(),
        ],
    })
}
