//! Synthetic two-arm trials with skewed, heavy-tailed innovations and known
//! treatment-effect paths.
//!
//! ```text
//! Y_it = mu_it + sum_h beta_h S_i,t-h + gamma1 H1(t) G_i
//! mu_it = phi1 mu_i,t-1 + sign * V_it * omega1      omega1 ~ LogGamma(alpha), mean 0
//! S_it = nu_it + gamma2 H2(t) G_i
//! nu_it = phi2 nu_i,t-1 + omega2                   omega2 ~ N(0, W)
//! V_it ~ Gamma(shape tau/2, rate tau/(2V))
//! ```
//!
//! Time runs over t = 0..T with four measurements per year.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::design::{Panel, Subject, SubjectSeries};
use crate::error::{Error, Result};

pub const STEPS_PER_YEAR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// t / T.
    Monotone,
    /// 4 (t/T)(1 - t/T).
    Parabola,
    /// Seeded Gaussian cumulative sum rescaled to [0, 1].
    RandomWalk,
    /// (1 - cos(2 pi t / 4)) / 2: one cycle per year.
    Seasonal,
    /// 0 at t = 0, 1 afterwards.
    Step,
    /// (t / T)^2.
    Quadratic,
    /// 1 at every t.
    Constant,
}

/// Seed of the frozen random-walk shape.
const RANDOM_WALK_SEED: u64 = 0x5eed_0f_a11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub values: Vec<f64>,
}

impl Trajectory {
    pub fn new(kind: TrajectoryKind, t_max: usize) -> Trajectory {
        let tt = t_max.max(1) as f64;
        let values = match kind {
            TrajectoryKind::Monotone => (0..=t_max).map(|t| t as f64 / tt).collect(),
            TrajectoryKind::Parabola => (0..=t_max).map(|t| 4.0 * (t as f64 / tt) * (1.0 - t as f64 / tt)).collect(),
            TrajectoryKind::RandomWalk => random_walk_shape(t_max),
            TrajectoryKind::Seasonal => (0..=t_max)
                .map(|t| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t as f64 / STEPS_PER_YEAR as f64).cos()))
                .collect(),
            TrajectoryKind::Step => (0..=t_max).map(|t| if t == 0 { 0.0 } else { 1.0 }).collect(),
            TrajectoryKind::Quadratic => (0..=t_max).map(|t| (t as f64 / tt).powi(2)).collect(),
            TrajectoryKind::Constant => vec![1.0; t_max + 1],
        };
        Trajectory { kind, values }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Cumulative sum of standard normals from a fixed seed, starting at 0 and
/// rescaled to [0, 1]. Deterministic for each T.
fn random_walk_shape(t_max: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(RANDOM_WALK_SEED);
    rng.set_stream(t_max as u64);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v = vec![0.0];
    for _ in 0..t_max {
        let last = *v.last().unwrap();
        v.push(last + normal.sample(&mut rng));
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; t_max + 1]
    }
}

/// How the "G(tau/2, tau/2V)" mixing law is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaReading {
    /// Shape tau/2, rate tau/(2V): mean V.
    Rate,
    /// Shape tau/2, rate tau V / 2.
    Product,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_per_arm: usize,
    pub t_max: usize,
    pub alpha_shape: f64,
    pub df_tau: f64,
    pub v: f64,
    pub w: f64,
    pub phi1: f64,
    pub phi2: f64,
    /// Slopes on S_t, S_{t-1}, ...
    pub beta: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sign: f64,
    pub h1: Trajectory,
    pub h2: Trajectory,
    pub gamma_reading: GammaReading,
    /// Probability that an outcome/surrogate pair after t = 0 is missing.
    pub missing: f64,
    pub seed: u64,
}

impl GenConfig {
    /// Defaults: alpha 1, tau 10, V 0.0025, W = 0.2 V, sign +1, phi1 0.9,
    /// phi2 0.5, beta 5, gamma2 0.06, monotone H1 = H2 and gamma1 set for
    /// PTE 0.75.
    pub fn new(n_per_arm: usize, t_max: usize) -> GenConfig {
        let v = 0.0025;
        let mut c = GenConfig {
            n_per_arm,
            t_max,
            alpha_shape: 1.0,
            df_tau: 10.0,
            v,
            w: 0.2 * v,
            phi1: 0.9,
            phi2: 0.5,
            beta: vec![5.0],
            gamma1: 0.0,
            gamma2: 0.06,
            sign: 1.0,
            h1: Trajectory::new(TrajectoryKind::Monotone, t_max),
            h2: Trajectory::new(TrajectoryKind::Monotone, t_max),
            gamma_reading: GammaReading::Rate,
            missing: 0.0,
            seed: 1,
        };
        c.gamma1 = gamma1_for(&c, 0.75).unwrap_or(0.0);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_arm == 0 {
            return Err(Error::config("need at least one subject per arm"));
        }
        if !(self.alpha_shape > 0.0) || !(self.df_tau > 0.0) || !(self.v > 0.0) || !(self.w >= 0.0) {
            return Err(Error::config("alpha, tau and V must be positive and W non-negative"));
        }
        if !(self.phi1.abs() <= 1.0) || !(self.phi2.abs() < 1.0) {
            return Err(Error::config("need |phi1| <= 1 and |phi2| < 1"));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::config("sign must be +1 or -1"));
        }
        if self.beta.is_empty() || self.beta.len() > self.t_max + 1 {
            return Err(Error::config("beta needs between 1 and T + 1 lag slopes"));
        }
        if self.h1.values.len() != self.t_max + 1 || self.h2.values.len() != self.t_max + 1 {
            return Err(Error::config("trajectory length must be T + 1"));
        }
        if !(0.0..1.0).contains(&self.missing) {
            return Err(Error::config("missing probability must lie in [0, 1)"));
        }
        let all = [self.gamma1, self.gamma2, self.v, self.w, self.phi1, self.phi2];
        if all.iter().chain(&self.beta).any(|x| !x.is_finite()) {
            return Err(Error::config("non-finite generator parameter"));
        }
        Ok(())
    }

    fn surrogate_pathway(&self) -> Vec<f64> {
        (0..=self.t_max)
            .map(|t| {
                self.gamma2
                    * self.beta.iter().enumerate().filter(|(h, _)| *h <= t).map(|(h, b)| b * self.h2.values[t - h]).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub delta: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub lpte: Vec<f64>,
    pub cpte: Vec<f64>,
    pub pte: f64,
    pub method: TruthMethod,
}

impl TruthRecord {
    fn from_paths(delta: Vec<f64>, delta_r: Vec<f64>, method: TruthMethod) -> TruthRecord {
        let lpte = delta.iter().zip(&delta_r).map(|(d, r)| if *d == 0.0 { f64::NAN } else { 1.0 - r / d }).collect();
        let mut cpte = Vec::with_capacity(delta.len());
        let (mut sd, mut sr) = (0.0, 0.0);
        for (d, r) in delta.iter().zip(&delta_r) {
            sd += d;
            sr += r;
            cpte.push(if sd == 0.0 { f64::NAN } else { 1.0 - sr / sd });
        }
        let pte = *cpte.last().unwrap_or(&f64::NAN);
        TruthRecord { delta, delta_r, lpte, cpte, pte, method }
    }
}

/// Delta(t) = gamma1 H1(t) + gamma2 sum_h beta_h H2(t - h); Delta_R(t) =
/// gamma1 H1(t), since given the whole surrogate history only the direct
/// path differs between arms.
pub fn analytic_truth(config: &GenConfig) -> TruthRecord {
    let direct: Vec<f64> = config.h1.values.iter().map(|h| config.gamma1 * h).collect();
    let delta = direct.iter().zip(config.surrogate_pathway()).map(|(a, b)| a + b).collect();
    TruthRecord::from_paths(delta, direct, TruthMethod::Analytic)
}

fn gamma1_for(config: &GenConfig, target: f64) -> Result<f64> {
    let s: f64 = config.surrogate_pathway().iter().sum();
    let h1 = config.h1.sum();
    if !(h1 > 0.0) {
        return Err(Error::config("H1 sums to zero; PTE cannot be calibrated through gamma1"));
    }
    Ok((1.0 - target) / target * s / h1)
}

/// Set gamma1 (given beta, gamma2 and the trajectories) so that the analytic
/// PTE equals `target`. Target 0 keeps gamma1 and sets gamma2 = 0.
pub fn calibrate(target: f64, h1: TrajectoryKind, h2: TrajectoryKind, base: &GenConfig) -> Result<GenConfig> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::config(format!("target PTE {target} outside [0, 1]")));
    }
    let mut c = base.clone();
    c.h1 = Trajectory::new(h1, c.t_max);
    c.h2 = Trajectory::new(h2, c.t_max);
    if target == 0.0 {
        c.gamma2 = 0.0;
        if c.gamma1 == 0.0 {
            c.gamma1 = base.gamma2 * base.beta.iter().sum::<f64>();
        }
        return Ok(c);
    }
    c.gamma1 = gamma1_for(&c, target)?;
    Ok(c)
}

/// The five homogeneity scenarios, T = 4 * years.
///
/// 1. monotone H1 = H2, constant LPTE 0.75;
/// 2. seasonal direct effect over a constant small surrogate pathway;
/// 3. constant small direct effect under a seasonal surrogate pathway;
/// 4. constant direct effect, surrogate pathway growing like (t/T)^2, CPTE(T) = 0.6;
/// 5. surrogate pathway constant, direct effect growing like (t/T)^2, CPTE(T) = 0.85.
pub fn scenario(id: u8, years: f64, base: &GenConfig) -> Result<GenConfig> {
    let steps = years * STEPS_PER_YEAR as f64;
    if !(steps >= 1.0) || (steps - steps.round()).abs() > 1e-9 {
        return Err(Error::config(format!("duration {years} years is not a positive whole number of quarters")));
    }
    let mut b = base.clone();
    b.t_max = steps.round() as usize;
    use TrajectoryKind::*;
    let c = match id {
        1 => calibrate(0.75, Monotone, Monotone, &b)?,
        2 => {
            let mut c = calibrate(0.5, Seasonal, Step, &b)?;
            c.gamma2 = b.gamma2 * 0.25;
            c.gamma1 = b.gamma2 * b.beta.iter().sum::<f64>() * 1.5;
            c
        }
        3 => {
            let mut c = calibrate(0.5, Step, Seasonal, &b)?;
            c.gamma1 = b.gamma2 * b.beta.iter().sum::<f64>() * 0.25;
            c.gamma2 = b.gamma2 * 1.5;
            c
        }
        4 => calibrate(0.6, Step, Quadratic, &b)?,
        5 => calibrate(0.85, Quadratic, Step, &b)?,
        _ => return Err(Error::config(format!("unknown scenario {id}; expected 1..5"))),
    };
    c.validate()?;
    Ok(c)
}

/// log of a Gamma(alpha, rate exp(psi(alpha))) variate; mean zero.
pub fn log_gamma_sample<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    Ok(log_gamma_dist(alpha)?.sample(rng).ln())
}

fn log_gamma_dist(alpha: f64) -> Result<Gamma<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("log-gamma shape must be positive"));
    }
    Gamma::new(alpha, (-digamma(alpha)).exp()).map_err(|e| Error::config(e.to_string()))
}

/// One draw of the heavy-tail mixing scale V_{i,t}.
pub fn mixing_scale_sample<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Result<f64> {
    Ok(Sampler::new(config)?.mix.sample(rng))
}

struct SubjectDraw {
    y: Vec<f64>,
    s: Vec<f64>,
}

struct Sampler {
    lg: Gamma<f64>,
    mix: Gamma<f64>,
    nu0: Normal<f64>,
    nu: Normal<f64>,
}

impl Sampler {
    fn new(c: &GenConfig) -> Result<Sampler> {
        let scale = match c.gamma_reading {
            GammaReading::Rate => 2.0 * c.v / c.df_tau,
            GammaReading::Product => 2.0 / (c.df_tau * c.v),
        };
        Ok(Sampler {
            lg: log_gamma_dist(c.alpha_shape)?,
            mix: Gamma::new(c.df_tau / 2.0, scale).map_err(|e| Error::config(e.to_string()))?,
            nu0: Normal::new(0.0, (c.w / (1.0 - c.phi2)).sqrt()).map_err(|e| Error::config(e.to_string()))?,
            nu: Normal::new(0.0, c.w.sqrt()).map_err(|e| Error::config(e.to_string()))?,
        })
    }

    fn draw<R: Rng>(&self, c: &GenConfig, arm: u8, rng: &mut R) -> SubjectDraw {
        let g = arm as f64;
        let n = c.t_max + 1;
        let mut s = Vec::with_capacity(n);
        let mut mu = Vec::with_capacity(n);
        let v0 = self.mix.sample(rng);
        let mut m = self.lg.sample(rng).ln() * (v0 / (1.0 - c.phi2)).sqrt();
        let mut nu = self.nu0.sample(rng);
        for t in 0..n {
            if t > 0 {
                let vt = self.mix.sample(rng);
                m = c.phi1 * m + c.sign * vt * self.lg.sample(rng).ln();
                nu = c.phi2 * nu + self.nu.sample(rng);
            }
            mu.push(m);
            s.push(nu + c.gamma2 * c.h2.values[t] * g);
        }
        let y = (0..n)
            .map(|t| {
                let lagged: f64 = c.beta.iter().enumerate().filter(|(h, _)| *h <= t).map(|(h, b)| b * s[t - h]).sum();
                mu[t] + lagged + c.gamma1 * c.h1.values[t] * g
            })
            .collect();
        SubjectDraw { y, s }
    }
}

fn subject_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulate a trial. Subject k (controls first) uses RNG stream k.
pub fn generate_panel(config: &GenConfig) -> Result<(Panel, TruthRecord)> {
    config.validate()?;
    let sampler = Sampler::new(config)?;
    let n = config.n_per_arm;
    let width = (2 * n).to_string().len();
    let series: Vec<SubjectSeries> = (0..2 * n)
        .into_par_iter()
        .map(|k| {
            let arm = (k >= n) as u8;
            let mut rng = subject_rng(config.seed, k as u64);
            let d = sampler.draw(config, arm, &mut rng);
            let mut outcome = Vec::with_capacity(d.y.len());
            let mut surrogate = Vec::with_capacity(d.y.len());
            for t in 0..d.y.len() {
                let keep = t == 0 || config.missing == 0.0 || rng.random::<f64>() >= config.missing;
                outcome.push(keep.then_some(d.y[t]));
                surrogate.push(keep.then_some(d.s[t]));
            }
            SubjectSeries {
                subject: Subject { id: format!("s{k:0width$}"), arm, covariates: Vec::new() },
                outcome,
                surrogate,
            }
        })
        .collect();
    let panel = Panel::new(Vec::new(), config.t_max + 1, series)?;
    Ok((panel, analytic_truth(config)))
}

/// Binning used by the Monte Carlo oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloBins {
    /// Equal-probability bins (control quantiles) for the current surrogate.
    pub current: usize,
    /// Equal-probability bins for each earlier surrogate value.
    pub earlier: usize,
}

impl Default for MonteCarloBins {
    fn default() -> Self {
        MonteCarloBins { current: 400, earlier: 2 }
    }
}

/// Brute-force truth: simulate `n_per_arm` subjects per arm, then at each t
/// average the within-cell outcome difference between arms over the control
/// distribution of discretised surrogate histories (S_0..S_t). Cells without
/// treated subjects are dropped and the weights renormalised. Meant for small
/// T: the number of cells grows like earlier^t.
pub fn monte_carlo_truth(config: &GenConfig, n_per_arm: usize, bins: MonteCarloBins) -> Result<TruthRecord> {
    config.validate()?;
    if bins.current == 0 || bins.earlier == 0 {
        return Err(Error::config("bin counts must be positive"));
    }
    let sampler = Sampler::new(config)?;
    let draws: Vec<SubjectDraw> = (0..2 * n_per_arm)
        .into_par_iter()
        .map(|k| {
            let mut rng = subject_rng(config.seed ^ 0x6d63_6f72_61636c65, k as u64);
            sampler.draw(config, (k >= n_per_arm) as u8, &mut rng)
        })
        .collect();
    let (ctrl, trt) = draws.split_at(n_per_arm);
    let nt = config.t_max + 1;
    let cuts = |t: usize, k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = ctrl.iter().map(|d| d.s[t]).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        (1..k).map(|j| v[j * v.len() / k]).collect()
    };
    let cut_sets: Vec<(Vec<f64>, Vec<f64>)> = (0..nt).map(|t| (cuts(t, bins.current), cuts(t, bins.earlier))).collect();
    let bin_of = |cuts: &[f64], x: f64| cuts.partition_point(|&c| c <= x);
    let mut delta = Vec::with_capacity(nt);
    let mut delta_r = Vec::with_capacity(nt);
    for t in 0..nt {
        let key = |d: &SubjectDraw| -> usize {
            let mut k = bin_of(&cut_sets[t].0, d.s[t]);
            for u in 0..t {
                k = k * bins.earlier + bin_of(&cut_sets[u].1, d.s[u]);
            }
            k
        };
        let mut cells: std::collections::BTreeMap<usize, [(f64, usize); 2]> = std::collections::BTreeMap::new();
        for (arm, group) in [ctrl, trt].iter().enumerate() {
            for d in group.iter() {
                let e = cells.entry(key(d)).or_insert([(0.0, 0); 2]);
                e[arm].0 += d.y[t];
                e[arm].1 += 1;
            }
        }
        let (mut num, mut wsum) = (0.0, 0.0);
        for c in cells.values() {
            if c[0].1 > 0 && c[1].1 > 0 {
                let w = c[0].1 as f64;
                num += w * (c[1].0 / c[1].1 as f64 - c[0].0 / c[0].1 as f64);
                wsum += w;
            }
        }
        let mean = |g: &[SubjectDraw]| g.iter().map(|d| d.y[t]).sum::<f64>() / g.len() as f64;
        delta.push(mean(trt) - mean(ctrl));
        delta_r.push(if wsum > 0.0 { num / wsum } else { f64::NAN });
    }
    Ok(TruthRecord::from_paths(delta, delta_r, TruthMethod::MonteCarlo))
}
