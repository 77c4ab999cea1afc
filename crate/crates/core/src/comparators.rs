//! Baseline PTE estimators: independent per-time least squares ("OLS") and
//! endpoint change scores ("Diff"), plus a replicated simulation harness
//! that scores them against the state-space pipeline.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, draw_indices, percentile_interval, validity_test, BootstrapConfig, IntervalEstimate};
use crate::design::{build_conditional, build_marginal, ConditionalConfig, ModelOptions, ModelSpec, Panel};
use crate::error::{Error, Result};
use crate::estimators::{control_averages, ContrastIndex, PteConfig};
use crate::simgen::{self, GenConfig, TrajectoryKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Ols,
    Diff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    /// Per-time paths for OLS; a single endpoint contrast for Diff.
    pub delta: Vec<f64>,
    pub delta_r: Vec<f64>,
    /// NaN where undefined.
    pub pte: f64,
    /// OLS: times with too few observations or a rank-deficient design.
    pub flagged_times: Vec<usize>,
    /// The PTE is undefined or rests on a denominator indistinguishable from 0.
    pub flagged: bool,
    /// Diff: subjects without both endpoints.
    pub dropped_subjects: usize,
    pub interval: Option<IntervalEstimate>,
    pub notes: Vec<String>,
}

fn cumulative_pte(delta: &[f64], delta_r: &[f64]) -> f64 {
    let d: f64 = delta.iter().sum();
    let r: f64 = delta_r.iter().sum();
    if d == 0.0 || !d.is_finite() || !r.is_finite() {
        f64::NAN
    } else {
        1.0 - r / d
    }
}

/// Least-squares coefficients, or None when X has fewer rows than columns
/// or is rank deficient.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    if x.nrows() < p {
        return None;
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * x.nrows().max(p) as f64;
    if svd.rank(tol) < p {
        return None;
    }
    svd.solve(y, tol).ok()
}

/// Per-time OLS coefficients of a model spec's rows; None where flagged.
fn per_time_ols(spec: &ModelSpec, panel: &Panel) -> Vec<Option<DVector<f64>>> {
    let rows = spec.rows();
    (0..panel.n_times())
        .into_par_iter()
        .map(|t| {
            let at: Vec<_> = rows.iter().filter(|r| r.t == t).collect();
            let n1 = at.iter().filter(|r| panel.arm(r.subject) == 1).count();
            if at.len() - n1 < 2 || n1 < 2 {
                return None;
            }
            let p = at[0].x.len();
            let x = DMatrix::from_fn(at.len(), p, |i, j| at[i].x[j]);
            let y = DVector::from_iterator(at.len(), at.iter().map(|r| r.y));
            least_squares(&x, &y)
        })
        .collect()
}

/// Cross-sectional OLS at each t: Y ~ 1 + G (+ covariates) for Delta(t) and
/// Y ~ 1 + G + surrogate window terms (+ covariates) for Delta_R(t), with
/// the same contrast averaging as the state-space estimator. Each arm needs
/// two observations at t.
pub fn ols_pte(panel: &Panel, config: &ConditionalConfig) -> Result<BaselineResult> {
    let opts = ModelOptions::default();
    let ms = build_marginal(panel, &config.covariates, &opts)?;
    let cs = build_conditional(panel, config, &opts)?;
    let contrast = ContrastIndex::from_layout(&cs.layout, config)?;
    let ctrl = control_averages(panel, config, &panel.arm_members(0))?;
    let mk = ms.layout.index_of("treatment").ok_or_else(|| Error::config("layout has no treatment path"))?;
    let mfit = per_time_ols(&ms, panel);
    let cfit = per_time_ols(&cs, panel);
    let mut delta = Vec::with_capacity(panel.n_times());
    let mut delta_r = Vec::with_capacity(panel.n_times());
    let mut flagged_times = Vec::new();
    for t in 0..panel.n_times() {
        match (&mfit[t], &cfit[t]) {
            (Some(m), Some(c)) => {
                delta.push(m[mk]);
                delta_r.push(contrast.delta_r(c.as_slice(), &ctrl.windows[t]));
            }
            _ => {
                flagged_times.push(t);
                delta.push(f64::NAN);
                delta_r.push(f64::NAN);
            }
        }
    }
    let pte = cumulative_pte(&delta, &delta_r);
    let scale = ms.outcome_sd;
    let d: f64 = delta.iter().sum();
    let mut notes = Vec::new();
    if !flagged_times.is_empty() {
        notes.push(format!("{} times had too few observations or a rank-deficient design", flagged_times.len()));
    }
    Ok(BaselineResult {
        method: BaselineMethod::Ols,
        flagged: !pte.is_finite() || d.abs() < crate::estimators::EPS_DENOM_REL * scale,
        delta,
        delta_r,
        pte,
        flagged_times,
        dropped_subjects: 0,
        interval: None,
        notes,
    })
}

/// Endpoint change scores dY = Y_T - Y_0, dS = S_T - S_0. Delta is the arm
/// difference in mean dY; Delta_R is the treatment coefficient of
/// dY ~ 1 + G + dS. The PTE is flagged when |Delta| is under two standard
/// errors, which is where the ratio stops being informative. Only
/// meaningful for monotone treatment effects.
pub fn diff_pte(panel: &Panel) -> Result<BaselineResult> {
    let tt = panel.t_max();
    if tt == 0 {
        return Err(Error::data("the change-score estimator needs at least two time points"));
    }
    let mut kept = Vec::new();
    for i in 0..panel.n_subjects() {
        let ends = (panel.outcome(i, 0), panel.outcome(i, tt), panel.surrogate(i, 0), panel.surrogate(i, tt));
        if let (Some(y0), Some(y1), Some(s0), Some(s1)) = ends {
            kept.push((panel.arm(i), y1 - y0, s1 - s0));
        }
    }
    let dropped = panel.n_subjects() - kept.len();
    let n1 = kept.iter().filter(|k| k.0 == 1).count();
    let n0 = kept.len() - n1;
    if n0 < 2 || n1 < 2 {
        return Err(Error::data(format!("need two subjects per arm with both endpoints; have {n0} and {n1}")));
    }
    let stats = |arm: u8, n: usize| {
        let m = kept.iter().filter(|k| k.0 == arm).map(|k| k.1).sum::<f64>() / n as f64;
        let v = kept.iter().filter(|k| k.0 == arm).map(|k| (k.1 - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (m, v)
    };
    let (m0, v0) = stats(0, n0);
    let (m1, v1) = stats(1, n1);
    let delta = m1 - m0;
    let se = (v0 / n0 as f64 + v1 / n1 as f64).sqrt();
    let x = DMatrix::from_fn(kept.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => kept[i].0 as f64,
        _ => kept[i].2,
    });
    let y = DVector::from_iterator(kept.len(), kept.iter().map(|k| k.1));
    let mut notes = vec!["change-score reconstruction; meaningful only for monotone treatment effects".to_string()];
    if dropped > 0 {
        notes.push(format!("{dropped} subjects lacked an endpoint and were dropped"));
    }
    let (delta_r, pte) = match least_squares(&x, &y) {
        Some(b) => (b[1], if delta == 0.0 { f64::NAN } else { 1.0 - b[1] / delta }),
        None => {
            notes.push("change-score regression is rank deficient".into());
            (f64::NAN, f64::NAN)
        }
    };
    let flagged = !pte.is_finite() || !(delta.abs() >= 2.0 * se);
    if flagged && pte.is_finite() {
        notes.push("endpoint contrast is within two standard errors of zero".into());
    }
    Ok(BaselineResult {
        method: BaselineMethod::Diff,
        delta: vec![delta],
        delta_r: vec![delta_r],
        pte,
        flagged_times: Vec::new(),
        flagged,
        dropped_subjects: dropped,
        interval: None,
        notes,
    })
}

/// Run a baseline on one panel.
pub fn baseline(method: BaselineMethod, panel: &Panel, config: &ConditionalConfig) -> Result<BaselineResult> {
    match method {
        BaselineMethod::Ols => ols_pte(panel, config),
        BaselineMethod::Diff => diff_pte(panel),
    }
}

/// Baseline plus a percentile interval from full refits on the same
/// resampling index streams the state-space bootstrap uses.
pub fn bootstrap_baseline(
    method: BaselineMethod,
    panel: &Panel,
    config: &ConditionalConfig,
    boot: &BootstrapConfig,
) -> Result<(BaselineResult, Vec<f64>)> {
    let mut point = baseline(method, panel, config)?;
    let arms: Vec<u8> = panel.subjects().iter().map(|s| s.arm).collect();
    let draws: Vec<f64> = (0..boot.replicates as u64)
        .into_par_iter()
        .map(|b| {
            let idx = draw_indices(&arms, boot.seed, b, boot.stratified);
            let rp = panel.resample(&idx)?;
            Ok(match baseline(method, &rp, config) {
                Ok(r) => r.pte,
                Err(Error::Data(_)) | Err(Error::Numerical(_)) => f64::NAN,
                Err(e) => return Err(e),
            })
        })
        .collect::<Result<_>>()?;
    point.interval = Some(percentile_interval(point.pte, &draws, boot.level));
    Ok((point, draws))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Ssm,
    Ols,
    Diff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub base: GenConfig,
    pub trajectory: TrajectoryKind,
    pub targets: Vec<f64>,
    pub replications: usize,
    pub bootstrap: BootstrapConfig,
    /// Validity-test threshold and alpha (interval level 1 - 2 alpha).
    pub threshold: f64,
    pub alpha: f64,
    pub methods: Vec<BenchMethod>,
    pub pte: PteConfig,
}

impl BenchmarkConfig {
    pub fn new(base: GenConfig) -> BenchmarkConfig {
        BenchmarkConfig {
            base,
            trajectory: TrajectoryKind::Monotone,
            targets: vec![0.5, 0.75, 0.9],
            replications: 50,
            bootstrap: BootstrapConfig { replicates: 300, ..BootstrapConfig::default() },
            threshold: 0.75,
            alpha: 0.05,
            methods: vec![BenchMethod::Ssm, BenchMethod::Ols, BenchMethod::Diff],
            pte: PteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: BenchMethod,
    pub target: f64,
    pub true_pte: f64,
    pub replications: usize,
    /// Replications with a defined estimate.
    pub n_defined: usize,
    pub mean_pte: f64,
    pub bias: f64,
    pub sd: f64,
    /// Share of defined replications whose interval covers the truth.
    pub coverage: f64,
    /// Share of all replications rejecting PTE <= threshold.
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub notes: Vec<String>,
}

/// One replication's (estimate, covers truth, rejects) per method.
type RepOutcome = Vec<(BenchMethod, f64, bool, bool)>;

fn bench_replication(cfg: &BenchmarkConfig, gen: &GenConfig, truth: f64, seed: u64) -> Result<RepOutcome> {
    let mut g = gen.clone();
    g.seed = seed;
    let (panel, _) = simgen::generate_panel(&g)?;
    let boot = BootstrapConfig { seed, ..cfg.bootstrap.clone() };
    let vlevel = 1.0 - 2.0 * cfg.alpha;
    let mut out = Vec::new();
    for &m in &cfg.methods {
        let (pte, draws) = match m {
            BenchMethod::Ssm => match bootstrap::bootstrap_panel(&panel, &cfg.pte, &boot) {
                Ok((a, b)) => (a.result.pte, b.draws.pte),
                Err(Error::Config(s)) => return Err(Error::Config(s)),
                Err(_) => (f64::NAN, Vec::new()),
            },
            BenchMethod::Ols | BenchMethod::Diff => {
                let bm = if m == BenchMethod::Ols { BaselineMethod::Ols } else { BaselineMethod::Diff };
                match bootstrap_baseline(bm, &panel, &cfg.pte.conditional, &boot) {
                    Ok((r, d)) if !r.flagged => (r.pte, d),
                    Ok(_) => (f64::NAN, Vec::new()),
                    Err(Error::Config(s)) => return Err(Error::Config(s)),
                    Err(_) => (f64::NAN, Vec::new()),
                }
            }
        };
        let ci = percentile_interval(pte, &draws, boot.level);
        let covers = ci.ci_low <= truth && truth <= ci.ci_high;
        let rejects = pte.is_finite()
            && validity_test(&percentile_interval(pte, &draws, vlevel), cfg.threshold, cfg.alpha)?.reject;
        out.push((m, pte, covers, rejects));
    }
    Ok(out)
}

/// Replicated simulation study: for each target PTE, calibrate the
/// generator, simulate, and score every method on bias, interval coverage
/// and validity-test rejections. Replication r uses generator seed
/// base.seed + r and the same bootstrap index streams for every method.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.replications == 0 || cfg.methods.is_empty() {
        return Err(Error::config("benchmark needs at least one replication and one method"));
    }
    let mut rows = Vec::new();
    for &target in &cfg.targets {
        let gen = simgen::calibrate(target, cfg.trajectory, cfg.trajectory, &cfg.base)?;
        let truth = simgen::analytic_truth(&gen).pte;
        let reps: Vec<RepOutcome> = (0..cfg.replications as u64)
            .map(|r| bench_replication(cfg, &gen, truth, cfg.base.seed.wrapping_add(r)))
            .collect::<Result<_>>()?;
        for &m in &cfg.methods {
            let mine: Vec<_> = reps.iter().flat_map(|o| o.iter().filter(|x| x.0 == m)).collect();
            let est: Vec<f64> = mine.iter().map(|x| x.1).filter(|v| v.is_finite()).collect();
            let n = est.len();
            let mean = est.iter().sum::<f64>() / n.max(1) as f64;
            let sd = if n > 1 { (est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { f64::NAN };
            let covered = mine.iter().filter(|x| x.1.is_finite() && x.2).count();
            rows.push(BenchmarkRow {
                method: m,
                target,
                true_pte: truth,
                replications: cfg.replications,
                n_defined: n,
                mean_pte: if n > 0 { mean } else { f64::NAN },
                bias: if n > 0 { mean - truth } else { f64::NAN },
                sd,
                coverage: if n > 0 { covered as f64 / n as f64 } else { f64::NAN },
                rejection_rate: mine.iter().filter(|x| x.3).count() as f64 / cfg.replications as f64,
            });
        }
    }
    Ok(BenchmarkReport {
        rows,
        notes: vec!["GEE and LMM baselines are not implemented and are absent from this table".into()],
    })
}
