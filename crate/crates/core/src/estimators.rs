//! Treatment-effect paths and proportion-of-treatment-effect summaries.
//!
//! Delta(t) is the treatment path of the marginal fit. Delta_R(t) is the
//! residual treatment path of the conditional fit plus, for arm-specific
//! surrogate coefficients, the f^(1) - f^(0) contrast averaged over the
//! control arm's surrogate histories at t.

use serde::{Deserialize, Serialize};

use crate::design::{surrogate_window, ConditionalConfig, ModelKind, ModelOptions, Panel, StateLayout};
use crate::dlm_core::{self, GaussianBelief, SmoothedFit};
use crate::error::{Error, Result};

/// Relative size of the near-zero denominator guard, in outcome SDs.
pub const EPS_DENOM_REL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectLabel {
    Delta,
    DeltaR,
    DeltaDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectPath {
    pub label: EffectLabel,
    /// Values for t = 0..T in outcome units.
    pub values: Vec<f64>,
    /// Posterior SD from the smoothed covariance (empty when not available).
    pub posterior_sd: Vec<f64>,
    /// Outcome SD used to scale the denominator guard.
    pub scale: f64,
    /// Times whose control average was borrowed from another time.
    pub imputed: Vec<usize>,
}

impl EffectPath {
    pub fn new(label: EffectLabel, values: Vec<f64>, scale: f64) -> Result<EffectPath> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("{label:?} path has non-finite entries")));
        }
        Ok(EffectPath { label, values, posterior_sd: Vec::new(), scale, imputed: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Delta(t): the smoothed treatment path of a marginal fit.
pub fn estimate_delta(fit: &SmoothedFit) -> Result<EffectPath> {
    if fit.kind != ModelKind::Marginal {
        return Err(Error::config("estimate_delta needs a marginal fit"));
    }
    let k = fit.layout.index_of("treatment").ok_or_else(|| Error::config("layout has no treatment path"))?;
    let mut p = EffectPath::new(EffectLabel::Delta, fit.path("treatment")?.to_vec(), fit.log.outcome_sd)?;
    p.posterior_sd = fit.shared.iter().map(|b| b.cov[(k, k)].max(0.0).sqrt()).collect();
    Ok(p)
}

/// Mean surrogate window (basis expansion of lags 0..K) over a control
/// multiset, per time.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAverages {
    pub windows: Vec<Vec<f64>>,
    pub imputed: Vec<usize>,
}

/// Averages over the listed control slots (repeats count with multiplicity).
/// Times without any complete control window borrow the nearest earlier
/// time, or the nearest later one at the start of follow-up.
pub fn control_averages(panel: &Panel, config: &ConditionalConfig, controls: &[usize]) -> Result<ControlAverages> {
    let windows: Vec<Vec<Option<Vec<f64>>>> = (0..panel.n_subjects())
        .map(|i| (0..panel.n_times()).map(|t| surrogate_window(panel, config, i, t)).collect())
        .collect();
    average_windows(&windows, controls, panel.n_times(), config.window_len())
}

/// Same as [`control_averages`] from precomputed per-subject, per-time windows.
pub fn average_windows(
    windows: &[Vec<Option<Vec<f64>>>],
    controls: &[usize],
    n_times: usize,
    len: usize,
) -> Result<ControlAverages> {
    let mut means: Vec<Option<Vec<f64>>> = Vec::with_capacity(n_times);
    for t in 0..n_times {
        let mut acc = vec![0.0; len];
        let mut n = 0usize;
        for &i in controls {
            if let Some(w) = &windows[i][t] {
                for (a, v) in acc.iter_mut().zip(w) {
                    *a += v;
                }
                n += 1;
            }
        }
        means.push((n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect()));
    }
    let mut imputed = Vec::new();
    let mut out = Vec::with_capacity(n_times);
    for t in 0..n_times {
        match &means[t] {
            Some(w) => out.push(w.clone()),
            None => {
                let src = (0..t).rev().chain(t + 1..n_times).find(|&u| means[u].is_some());
                let u = src.ok_or_else(|| Error::data("no control subject has a complete surrogate window at any time"))?;
                imputed.push(t);
                out.push(means[u].clone().unwrap());
            }
        }
    }
    Ok(ControlAverages { windows: out, imputed })
}

/// Positions of the residual treatment path and of the contrast
/// coefficients (lag-major, same order as the surrogate window).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastIndex {
    pub treatment: usize,
    pub contrast: Vec<usize>,
}

impl ContrastIndex {
    pub fn from_fit(fit: &SmoothedFit) -> Result<ContrastIndex> {
        let cfg = fit.log.conditional.as_ref().ok_or_else(|| Error::config("fit carries no conditional configuration"))?;
        ContrastIndex::from_layout(&fit.layout, cfg)
    }

    pub fn from_layout(layout: &StateLayout, cfg: &ConditionalConfig) -> Result<ContrastIndex> {
        let treatment = layout.index_of("treatment").ok_or_else(|| Error::config("layout has no treatment path"))?;
        let contrast = if cfg.basis.per_arm {
            let nb = cfg.basis.dim();
            (0..=cfg.max_lag)
                .flat_map(|h| (0..nb).map(move |k| format!("fc[{h},{k}]")))
                .map(|n| layout.index_of(&n).ok_or_else(|| Error::config(format!("layout lacks {n}"))))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(ContrastIndex { treatment, contrast })
    }

    /// delta_1t + sum_k fc_t[k] * wbar_t[k] from shared-block means at t.
    pub fn delta_r(&self, shared_mean: &[f64], wbar: &[f64]) -> f64 {
        let mut v = shared_mean[self.treatment];
        for (&c, w) in self.contrast.iter().zip(wbar) {
            v += shared_mean[c] * w;
        }
        v
    }

    fn delta_r_sd(&self, b: &GaussianBelief, wbar: &[f64]) -> f64 {
        let mut idx = vec![self.treatment];
        idx.extend(&self.contrast);
        let mut a = vec![1.0];
        a.extend_from_slice(&wbar[..self.contrast.len()]);
        let mut v = 0.0;
        for (p, &i) in idx.iter().enumerate() {
            for (q, &j) in idx.iter().enumerate() {
                v += a[p] * a[q] * b.cov[(i, j)];
            }
        }
        v.max(0.0).sqrt()
    }
}

/// Delta_R(t) from a conditional fit, with the contrast term averaged over
/// all controls of `panel`.
pub fn estimate_delta_r(fit: &SmoothedFit, panel: &Panel) -> Result<EffectPath> {
    if fit.kind != ModelKind::Conditional {
        return Err(Error::config("estimate_delta_r needs a conditional fit"));
    }
    if panel.n_times() != fit.n_times() {
        return Err(Error::config("panel and fit have different time grids"));
    }
    let cfg = fit.log.conditional.as_ref().ok_or_else(|| Error::config("fit carries no conditional configuration"))?;
    let idx = ContrastIndex::from_fit(fit)?;
    let ctrl = control_averages(panel, cfg, &panel.arm_members(0))?;
    let values: Vec<f64> =
        fit.shared.iter().zip(&ctrl.windows).map(|(b, w)| idx.delta_r(b.mean.as_slice(), w)).collect();
    let mut p = EffectPath::new(EffectLabel::DeltaR, values, fit.log.outcome_sd)?;
    p.posterior_sd = fit.shared.iter().zip(&ctrl.windows).map(|(b, w)| idx.delta_r_sd(b, w)).collect();
    p.imputed = ctrl.imputed;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PteResult {
    pub delta: EffectPath,
    pub delta_r: EffectPath,
    /// 1 - Delta_R(t)/Delta(t); NaN where flagged.
    pub lpte: Vec<f64>,
    /// 1 - sum Delta_R / sum Delta up to t; NaN where flagged.
    pub cpte: Vec<f64>,
    /// cpte[T]; NaN when undefined.
    pub pte: f64,
    /// Cumulative denominators sum_{h<=t} Delta(h).
    pub denominators: Vec<f64>,
    pub lpte_flagged: Vec<bool>,
    pub cpte_flagged: Vec<bool>,
    pub eps_denom: f64,
}

impl PteResult {
    pub fn pte_defined(&self) -> bool {
        !self.cpte_flagged.last().copied().unwrap_or(true)
    }
}

/// LPTE, CPTE and PTE. Estimates are not clamped to [0, 1].
pub fn compute_pte(delta: &EffectPath, delta_r: &EffectPath) -> Result<PteResult> {
    if delta.len() != delta_r.len() || delta.is_empty() {
        return Err(Error::config("delta and delta_R paths differ in length"));
    }
    let eps = EPS_DENOM_REL * delta.scale.abs();
    let n = delta.len();
    let mut lpte = Vec::with_capacity(n);
    let mut lflag = Vec::with_capacity(n);
    let mut cpte = Vec::with_capacity(n);
    let mut cflag = Vec::with_capacity(n);
    let mut denominators = Vec::with_capacity(n);
    let (mut sd, mut sr) = (0.0, 0.0);
    for t in 0..n {
        let (d, r) = (delta.values[t], delta_r.values[t]);
        if d.abs() < eps {
            lpte.push(f64::NAN);
            lflag.push(true);
        } else {
            lpte.push(1.0 - r / d);
            lflag.push(false);
        }
        sd += d;
        sr += r;
        denominators.push(sd);
        if sd.abs() < eps {
            cpte.push(f64::NAN);
            cflag.push(true);
        } else {
            cpte.push(1.0 - sr / sd);
            cflag.push(false);
        }
    }
    let pte = cpte[n - 1];
    Ok(PteResult {
        delta: delta.clone(),
        delta_r: delta_r.clone(),
        lpte,
        cpte,
        pte,
        denominators,
        lpte_flagged: lflag,
        cpte_flagged: cflag,
        eps_denom: eps,
    })
}

/// Model configuration for the whole point-estimate pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PteConfig {
    pub conditional: ConditionalConfig,
    pub options: ModelOptions,
}

impl Default for PteConfig {
    fn default() -> Self {
        PteConfig { conditional: ConditionalConfig::default(), options: ModelOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct PteAnalysis {
    pub marginal: SmoothedFit,
    pub conditional: SmoothedFit,
    pub result: PteResult,
}

/// Build and fit both working models, then compute the PTE summaries. The
/// marginal model uses the same covariates as the conditional one.
pub fn analyze(panel: &Panel, config: &PteConfig) -> Result<PteAnalysis> {
    let ms = crate::design::build_marginal(panel, &config.conditional.covariates, &config.options)?;
    let cs = crate::design::build_conditional(panel, &config.conditional, &config.options)?;
    let marginal = dlm_core::fit(&ms)?;
    let conditional = dlm_core::fit(&cs)?;
    let result = compute_pte(&estimate_delta(&marginal)?, &estimate_delta_r(&conditional, panel)?)?;
    Ok(PteAnalysis { marginal, conditional, result })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceRow {
    pub t: usize,
    pub n0: usize,
    pub n1: usize,
    /// max over the pooled grid of Surv0(s) - Surv1(s).
    pub statistic: f64,
    /// Two-sample KS slack at the 5% level.
    pub slack: f64,
    pub flagged: bool,
}

/// Marginal (not history-conditional) check of forward dominance of the
/// treated surrogate distribution over the control one, per time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub rows: Vec<DominanceRow>,
    pub skipped: Vec<usize>,
    pub note: String,
}

pub const DOMINANCE_MIN_PER_ARM: usize = 5;

pub fn check_surrogate_dominance(panel: &Panel) -> DominanceReport {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for t in 0..panel.n_times() {
        let mut s: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for i in 0..panel.n_subjects() {
            if let Some(v) = panel.surrogate(i, t) {
                s[panel.arm(i) as usize].push(v);
            }
        }
        if s[0].len() < DOMINANCE_MIN_PER_ARM || s[1].len() < DOMINANCE_MIN_PER_ARM {
            skipped.push(t);
            continue;
        }
        for v in &mut s {
            v.sort_by(|a, b| a.total_cmp(b));
        }
        let ecdf = |v: &[f64], x: f64| v.partition_point(|&y| y <= x) as f64 / v.len() as f64;
        let mut stat = f64::NEG_INFINITY;
        for x in s[0].iter().chain(&s[1]) {
            stat = stat.max(ecdf(&s[1], *x) - ecdf(&s[0], *x));
        }
        let (n0, n1) = (s[0].len(), s[1].len());
        let slack = 1.22 * (((n0 + n1) as f64) / ((n0 * n1) as f64)).sqrt();
        rows.push(DominanceRow { t, n0, n1, statistic: stat, slack, flagged: stat > slack });
    }
    DominanceReport {
        rows,
        skipped,
        note: "marginal check of surrogate dominance per time; it does not condition on surrogate history".into(),
    }
}
