//! Panels and the two working models (marginal and conditional) as
//! materialised state-space specifications.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default diffuseness multiplier for the prior variance.
pub const DEFAULT_KAPPA: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub arm: u8,
    pub covariates: Vec<f64>,
}

/// Observed trial on the grid t = 0..T. Subjects are kept in a canonical
/// order (sorted by id) so every downstream sum runs in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    subjects: Vec<Subject>,
    covariate_names: Vec<String>,
    n_times: usize,
    outcome: Vec<Option<f64>>,
    surrogate: Vec<Option<f64>>,
}

/// One subject's series, used to assemble a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub subject: Subject,
    pub outcome: Vec<Option<f64>>,
    pub surrogate: Vec<Option<f64>>,
}

impl Panel {
    /// Builds a panel from per-subject series; every series must have
    /// `n_times` entries. Subjects are sorted by id.
    pub fn new(covariate_names: Vec<String>, n_times: usize, series: Vec<SubjectSeries>) -> Result<Panel> {
        let mut series = series;
        series.sort_by(|a, b| a.subject.id.cmp(&b.subject.id));
        Self::assemble(covariate_names, n_times, series)
    }

    fn assemble(covariate_names: Vec<String>, n_times: usize, series: Vec<SubjectSeries>) -> Result<Panel> {
        if n_times == 0 {
            return Err(Error::data("panel needs at least one time point"));
        }
        let mut seen = BTreeSet::new();
        let names: BTreeSet<&String> = covariate_names.iter().collect();
        if names.len() != covariate_names.len() {
            return Err(Error::data("duplicate covariate name"));
        }
        let mut subjects = Vec::with_capacity(series.len());
        let mut outcome = Vec::with_capacity(series.len() * n_times);
        let mut surrogate = Vec::with_capacity(series.len() * n_times);
        for s in series {
            if !seen.insert(s.subject.id.clone()) {
                return Err(Error::data(format!("duplicate subject id '{}'", s.subject.id)));
            }
            if s.subject.arm > 1 {
                return Err(Error::data(format!("subject '{}': arm must be 0 or 1", s.subject.id)));
            }
            if s.subject.covariates.len() != covariate_names.len() {
                return Err(Error::data(format!("subject '{}': covariate count mismatch", s.subject.id)));
            }
            if s.outcome.len() != n_times || s.surrogate.len() != n_times {
                return Err(Error::data(format!("subject '{}': series length must be {n_times}", s.subject.id)));
            }
            outcome.extend(s.outcome);
            surrogate.extend(s.surrogate);
            subjects.push(s.subject);
        }
        if subjects.is_empty() {
            return Err(Error::data("panel has no subjects"));
        }
        Ok(Panel { subjects, covariate_names, n_times, outcome, surrogate })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Number of grid points, T + 1.
    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn t_max(&self) -> usize {
        self.n_times - 1
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &Subject {
        &self.subjects[i]
    }

    pub fn arm(&self, i: usize) -> u8 {
        self.subjects[i].arm
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome(&self, i: usize, t: usize) -> Option<f64> {
        self.outcome[i * self.n_times + t]
    }

    pub fn surrogate(&self, i: usize, t: usize) -> Option<f64> {
        self.surrogate[i * self.n_times + t]
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.binary_search_by(|s| s.id.as_str().cmp(id)).ok()
    }

    pub fn arm_members(&self, arm: u8) -> Vec<usize> {
        (0..self.n_subjects()).filter(|&i| self.arm(i) == arm).collect()
    }

    pub fn series(&self, i: usize) -> SubjectSeries {
        let r = i * self.n_times..(i + 1) * self.n_times;
        SubjectSeries {
            subject: self.subjects[i].clone(),
            outcome: self.outcome[r.clone()].to_vec(),
            surrogate: self.surrogate[r].to_vec(),
        }
    }

    /// Panel whose j-th subject is a copy of subject `indices[j]`. Copies get
    /// the id `<id>~<j>` and keep slot order, so slot j maps back to `indices[j]`.
    pub fn resample(&self, indices: &[usize]) -> Result<Panel> {
        let width = indices.len().to_string().len();
        let series = indices
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut s = self.series(i);
                s.subject.id = format!("{}~{:0width$}", s.subject.id, j);
                s
            })
            .collect();
        Self::assemble(self.covariate_names.clone(), self.n_times, series)
    }

    /// Mean and unbiased variance of all present outcomes.
    pub fn outcome_moments(&self) -> (f64, f64) {
        let vals: Vec<f64> = self.outcome.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        let n = vals.len() as f64;
        if vals.is_empty() {
            return (0.0, 0.0);
        }
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var)
    }

    pub(crate) fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::config(format!("unknown covariate '{name}'")))
    }
}

/// Result of [`validate_panel`]: pass/fail flags plus per-time counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelReport {
    /// Times in 0..=T with no observed outcome at all.
    pub grid_gaps: Vec<usize>,
    pub nonfinite_cells: Vec<(String, usize)>,
    pub arm_counts: [usize; 2],
    pub distinct_outcomes: bool,
    /// Observed outcomes per (t, arm).
    pub outcome_counts: Vec<[usize; 2]>,
    /// Observed surrogates per (t, arm).
    pub surrogate_counts: Vec<[usize; 2]>,
}

impl PanelReport {
    pub fn grid_regular(&self) -> bool {
        self.grid_gaps.is_empty()
    }

    pub fn finite(&self) -> bool {
        self.nonfinite_cells.is_empty()
    }

    pub fn both_arms(&self) -> bool {
        self.arm_counts[0] > 0 && self.arm_counts[1] > 0
    }

    pub fn passed(&self) -> bool {
        self.grid_regular() && self.finite() && self.both_arms() && self.distinct_outcomes
    }

    /// Latest time with at least `min_per_arm` observed outcomes in both arms.
    pub fn lag_cap(&self, min_per_arm: usize) -> Option<usize> {
        self.outcome_counts.iter().rposition(|c| c[0] >= min_per_arm && c[1] >= min_per_arm)
    }
}

pub fn validate_panel(panel: &Panel) -> PanelReport {
    let nt = panel.n_times();
    let mut outcome_counts = vec![[0usize; 2]; nt];
    let mut surrogate_counts = vec![[0usize; 2]; nt];
    let mut nonfinite_cells = Vec::new();
    let mut arm_counts = [0usize; 2];
    let mut first: Option<f64> = None;
    let mut distinct = false;
    for i in 0..panel.n_subjects() {
        let g = panel.arm(i) as usize;
        arm_counts[g] += 1;
        if panel.subject(i).covariates.iter().any(|c| !c.is_finite()) {
            nonfinite_cells.push((panel.subject(i).id.clone(), 0));
        }
        for t in 0..nt {
            if let Some(y) = panel.outcome(i, t) {
                if y.is_finite() {
                    outcome_counts[t][g] += 1;
                    match first {
                        None => first = Some(y),
                        Some(f) if f != y => distinct = true,
                        _ => {}
                    }
                } else {
                    nonfinite_cells.push((panel.subject(i).id.clone(), t));
                }
            }
            if let Some(s) = panel.surrogate(i, t) {
                if s.is_finite() {
                    surrogate_counts[t][g] += 1;
                } else {
                    nonfinite_cells.push((panel.subject(i).id.clone(), t));
                }
            }
        }
    }
    let grid_gaps = (0..nt).filter(|&t| outcome_counts[t][0] + outcome_counts[t][1] == 0).collect();
    PanelReport {
        grid_gaps,
        nonfinite_cells,
        arm_counts,
        distinct_outcomes: distinct,
        outcome_counts,
        surrogate_counts,
    }
}

/// Shared dynamic effect groups; each may carry its own discount override.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectGroup {
    Intercept,
    Treatment,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountConfig {
    pub shared: f64,
    pub subject: f64,
    /// Groups listed here form their own evolution block with this discount.
    #[serde(default)]
    pub overrides: BTreeMap<EffectGroup, f64>,
}

impl Default for DiscountConfig {
    fn default() -> Self {
        DiscountConfig { shared: 0.95, subject: 0.95, overrides: BTreeMap::new() }
    }
}

impl DiscountConfig {
    pub fn uniform(d: f64) -> Self {
        DiscountConfig { shared: d, subject: d, overrides: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, d: f64| {
            if d > 0.0 && d <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("discount '{name}' = {d} outside (0, 1]")))
            }
        };
        check("shared", self.shared)?;
        check("subject", self.subject)?;
        for (g, d) in &self.overrides {
            check(&format!("{g:?}").to_lowercase(), *d)?;
        }
        Ok(())
    }

    pub fn group_discount(&self, g: EffectGroup) -> f64 {
        self.overrides.get(&g).copied().unwrap_or(self.shared)
    }
}

/// Named coordinates of the shared block plus one level per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    names: Vec<String>,
    /// `None` marks a static covariate coefficient.
    groups: Vec<Option<EffectGroup>>,
    n_subjects: usize,
    index: BTreeMap<String, usize>,
}

impl StateLayout {
    pub fn new(entries: Vec<(String, Option<EffectGroup>)>, n_subjects: usize) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (k, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), k).is_some() {
                return Err(Error::config(format!("state name '{name}' used twice")));
            }
        }
        let (names, groups) = entries.into_iter().unzip();
        Ok(StateLayout { names, groups, n_subjects, index })
    }

    pub fn shared_dim(&self) -> usize {
        self.names.len()
    }

    pub fn subject_dim(&self) -> usize {
        1
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn total_dim(&self) -> usize {
        self.shared_dim() + self.subject_dim() * self.n_subjects
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn group(&self, k: usize) -> Option<EffectGroup> {
        self.groups[k]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn level_index(&self, subject: usize) -> usize {
        self.shared_dim() + subject
    }

    /// Shared states that evolve, grouped into discount blocks. Blocks with
    /// discount 1 and covariate coefficients are static and omitted.
    pub fn evolution_blocks(&self, d: &DiscountConfig) -> Vec<(Vec<usize>, f64)> {
        let mut default_block = Vec::new();
        let mut own: BTreeMap<EffectGroup, Vec<usize>> = BTreeMap::new();
        for (k, g) in self.groups.iter().enumerate() {
            if let Some(g) = g {
                if d.overrides.contains_key(g) {
                    own.entry(*g).or_default().push(k);
                } else {
                    default_block.push(k);
                }
            }
        }
        let mut blocks = Vec::new();
        if !default_block.is_empty() && d.shared < 1.0 {
            blocks.push((default_block, d.shared));
        }
        for (g, idx) in own {
            let dg = d.overrides[&g];
            if dg < 1.0 {
                blocks.push((idx, dg));
            }
        }
        blocks
    }

    /// Shared indices that evolve, in block order.
    pub fn moving_states(&self, d: &DiscountConfig) -> Vec<usize> {
        self.evolution_blocks(d).into_iter().flat_map(|(b, _)| b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Marginal,
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BasisKind {
    Linear,
    Bins { edges: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateBasis {
    pub kind: BasisKind,
    /// Arm-specific coefficients: adds G * b(S) columns whose coefficients are
    /// the f^(1) - f^(0) contrast.
    pub per_arm: bool,
}

impl Default for SurrogateBasis {
    fn default() -> Self {
        SurrogateBasis { kind: BasisKind::Linear, per_arm: false }
    }
}

impl SurrogateBasis {
    pub fn validate(&self) -> Result<()> {
        if let BasisKind::Bins { edges } = &self.kind {
            if edges.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
                return Err(Error::config("bin edges must be finite and strictly increasing"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            BasisKind::Linear => 1,
            BasisKind::Bins { edges } => edges.len(),
        }
    }
}

/// Linear: `[s]`. Bins: one-hot over left-closed intervals, clamped at both ends.
pub fn basis_expand(basis: &SurrogateBasis, value: f64) -> Vec<f64> {
    match &basis.kind {
        BasisKind::Linear => vec![value],
        BasisKind::Bins { edges } => {
            let mut v = vec![0.0; edges.len()];
            let k = edges.iter().take_while(|e| **e <= value).count().saturating_sub(1);
            v[k] = 1.0;
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalConfig {
    pub max_lag: usize,
    pub basis: SurrogateBasis,
    pub covariates: Vec<String>,
}

impl Default for ConditionalConfig {
    fn default() -> Self {
        ConditionalConfig { max_lag: 0, basis: SurrogateBasis::default(), covariates: Vec::new() }
    }
}

impl ConditionalConfig {
    /// Length of a surrogate window: (K + 1) lags times the basis dimension.
    pub fn window_len(&self) -> usize {
        (self.max_lag + 1) * self.basis.dim()
    }
}

/// Basis expansions of S_{i,t}, ..., S_{i,t-K}, lag-major. Lags reaching
/// before t = 0 contribute zeros. `None` if a needed surrogate is missing.
pub fn surrogate_window(panel: &Panel, config: &ConditionalConfig, i: usize, t: usize) -> Option<Vec<f64>> {
    let nb = config.basis.dim();
    let mut w = vec![0.0; config.window_len()];
    for h in 0..=config.max_lag.min(t) {
        let s = panel.surrogate(i, t - h)?;
        w[h * nb..(h + 1) * nb].copy_from_slice(&basis_expand(&config.basis, s));
    }
    Some(w)
}

/// Prior over the states at t = 0: zero mean, diagonal variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub shared_var: Vec<f64>,
    pub level_var: f64,
}

/// Realised evolution covariances of a fit, reusable as a fixed-W model.
/// `shared_w[t]` is the t-1 -> t covariance over the moving shared states
/// (entry 0 is empty); `level_w[i][t]` likewise for subject i's level.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEvolution {
    pub moving: Vec<usize>,
    pub shared_w: Vec<DMatrix<f64>>,
    pub level_w: Vec<Vec<f64>>,
}

/// One observed cell: shared design row, centred outcome, subject and time.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsRow {
    pub subject: usize,
    pub t: usize,
    pub x: Vec<f64>,
    pub y: f64,
}

/// Fit-time options that are not part of the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub discounts: DiscountConfig,
    pub kappa: f64,
    /// Observation variance per arm.
    pub obs_var: [f64; 2],
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { discounts: DiscountConfig::default(), kappa: DEFAULT_KAPPA, obs_var: [1.0, 1.0] }
    }
}

impl ModelOptions {
    pub fn with_discounts(discounts: DiscountConfig) -> Self {
        ModelOptions { discounts, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.discounts.validate()?;
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::config("kappa must be positive and finite"));
        }
        if self.obs_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("observation variances must be positive"));
        }
        Ok(())
    }
}

/// A fully materialised working model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layout: StateLayout,
    pub options: ModelOptions,
    pub prior: Prior,
    /// When set, these covariances replace the discount recursion.
    pub frozen: Option<FrozenEvolution>,
    /// Sample mean subtracted from every outcome; added back to the intercept path.
    pub outcome_offset: f64,
    pub outcome_sd: f64,
    pub conditional: Option<ConditionalConfig>,
    pub covariates: Vec<String>,
    /// Outcome cells dropped for missing surrogate history.
    pub dropped_cells: usize,
    n_times: usize,
    arms: Vec<u8>,
    rows: Vec<ObsRow>,
}

impl ModelSpec {
    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_subjects(&self) -> usize {
        self.arms.len()
    }

    pub fn arm(&self, i: usize) -> u8 {
        self.arms[i]
    }

    pub fn arms(&self) -> &[u8] {
        &self.arms
    }

    /// Observation rows sorted by (t, subject).
    pub fn rows(&self) -> &[ObsRow] {
        &self.rows
    }

    pub fn row(&self, subject: usize, t: usize) -> Option<&ObsRow> {
        self.rows
            .binary_search_by(|r| (r.t, r.subject).cmp(&(t, subject)))
            .ok()
            .map(|k| &self.rows[k])
    }

    pub fn obs_var(&self, subject: usize) -> f64 {
        self.options.obs_var[self.arms[subject] as usize]
    }

    pub fn with_frozen(&self, frozen: FrozenEvolution) -> ModelSpec {
        ModelSpec { frozen: Some(frozen), ..self.clone() }
    }

    /// Same model without the observation of `subject` at `t`; centring,
    /// scaling and prior are left as they were.
    pub fn without_cell(&self, subject: usize, t: usize) -> ModelSpec {
        let mut s = self.clone();
        s.rows.retain(|r| !(r.subject == subject && r.t == t));
        s
    }

    /// Sub-model of selected subjects (slots may repeat). Frozen level
    /// covariances follow their subjects; the shared prior and evolution are
    /// divided by `prior_share` (prior raised to that power).
    pub fn restricted(&self, slots: &[usize], prior_share: f64) -> Result<ModelSpec> {
        if slots.is_empty() {
            return Err(Error::config("empty subject selection"));
        }
        if !(prior_share > 0.0) {
            return Err(Error::config("prior share must be positive"));
        }
        let mut rows = Vec::new();
        for (j, &i) in slots.iter().enumerate() {
            if i >= self.n_subjects() {
                return Err(Error::data(format!("subject index {i} out of range")));
            }
            for r in self.rows.iter().filter(|r| r.subject == i) {
                rows.push(ObsRow { subject: j, ..r.clone() });
            }
        }
        rows.sort_by(|a, b| (a.t, a.subject).cmp(&(b.t, b.subject)));
        let mut prior = self.prior.clone();
        for v in &mut prior.shared_var {
            *v /= prior_share;
        }
        let frozen = self.frozen.as_ref().map(|f| FrozenEvolution {
            moving: f.moving.clone(),
            shared_w: f.shared_w.iter().map(|w| w / prior_share).collect(),
            level_w: slots.iter().map(|&i| f.level_w[i].clone()).collect(),
        });
        let layout = StateLayout { n_subjects: slots.len(), ..self.layout.clone() };
        Ok(ModelSpec {
            layout,
            prior,
            frozen,
            arms: slots.iter().map(|&i| self.arms[i]).collect(),
            rows,
            ..self.clone()
        })
    }
}

struct Common {
    offset: f64,
    var: f64,
}

fn common_checks(panel: &Panel, options: &ModelOptions) -> Result<Common> {
    options.validate()?;
    let report = validate_panel(panel);
    if let Some((id, t)) = report.nonfinite_cells.first() {
        return Err(Error::data(format!("non-finite value for subject '{id}' at t={t}")));
    }
    if !report.both_arms() {
        return Err(Error::data("both arms need at least one subject (treatment path not identified)"));
    }
    if !report.distinct_outcomes {
        return Err(Error::data("outcome has fewer than two distinct values"));
    }
    let (offset, var) = panel.outcome_moments();
    Ok(Common { offset, var })
}

fn covariate_columns(panel: &Panel, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| panel.covariate_index(n)).collect()
}

fn make_prior(layout: &StateLayout, var_y: f64, options: &ModelOptions) -> Prior {
    let v_ref = 0.5 * (options.obs_var[0] + options.obs_var[1]);
    let p = options.kappa * var_y * v_ref;
    Prior { shared_var: vec![p; layout.shared_dim()], level_var: p }
}

/// Marginal model: intercept path nu_t, treatment path delta_2t, static
/// covariate coefficients and one random-walk level per subject.
pub fn build_marginal(panel: &Panel, covariates: &[String], options: &ModelOptions) -> Result<ModelSpec> {
    let common = common_checks(panel, options)?;
    let cov_cols = covariate_columns(panel, covariates)?;
    let mut entries = vec![
        ("intercept".to_string(), Some(EffectGroup::Intercept)),
        ("treatment".to_string(), Some(EffectGroup::Treatment)),
    ];
    entries.extend(covariates.iter().map(|c| (format!("x[{c}]"), None)));
    let layout = StateLayout::new(entries, panel.n_subjects())?;
    let mut rows = Vec::new();
    for t in 0..panel.n_times() {
        for i in 0..panel.n_subjects() {
            if let Some(y) = panel.outcome(i, t) {
                let s = panel.subject(i);
                let mut x = vec![1.0, s.arm as f64];
                x.extend(cov_cols.iter().map(|&c| s.covariates[c]));
                rows.push(ObsRow { subject: i, t, x, y: y - common.offset });
            }
        }
    }
    Ok(ModelSpec {
        kind: ModelKind::Marginal,
        prior: make_prior(&layout, common.var, options),
        layout,
        options: options.clone(),
        frozen: None,
        outcome_offset: common.offset,
        outcome_sd: common.var.sqrt(),
        conditional: None,
        covariates: covariates.to_vec(),
        dropped_cells: 0,
        n_times: panel.n_times(),
        arms: panel.subjects().iter().map(|s| s.arm).collect(),
        rows,
    })
}

/// Conditional model: intercept mu_t, residual treatment path delta_1t,
/// surrogate coefficients for lags 0..K (plus contrast coefficients when the
/// basis is per-arm), static covariates and subject levels.
pub fn build_conditional(panel: &Panel, config: &ConditionalConfig, options: &ModelOptions) -> Result<ModelSpec> {
    let common = common_checks(panel, options)?;
    config.basis.validate()?;
    if config.max_lag > panel.t_max() {
        return Err(Error::config(format!("max lag {} exceeds T = {}", config.max_lag, panel.t_max())));
    }
    let cov_cols = covariate_columns(panel, &config.covariates)?;
    let nb = config.basis.dim();
    let mut entries = vec![
        ("intercept".to_string(), Some(EffectGroup::Intercept)),
        ("treatment".to_string(), Some(EffectGroup::Treatment)),
    ];
    for h in 0..=config.max_lag {
        for k in 0..nb {
            entries.push((format!("f[{h},{k}]"), Some(EffectGroup::Surrogate)));
        }
    }
    if config.basis.per_arm {
        for h in 0..=config.max_lag {
            for k in 0..nb {
                entries.push((format!("fc[{h},{k}]"), Some(EffectGroup::Surrogate)));
            }
        }
    }
    entries.extend(config.covariates.iter().map(|c| (format!("x[{c}]"), None)));
    let layout = StateLayout::new(entries, panel.n_subjects())?;
    let mut rows = Vec::new();
    let mut dropped = 0;
    for t in 0..panel.n_times() {
        for i in 0..panel.n_subjects() {
            let Some(y) = panel.outcome(i, t) else { continue };
            let Some(w) = surrogate_window(panel, config, i, t) else {
                dropped += 1;
                continue;
            };
            let s = panel.subject(i);
            let g = s.arm as f64;
            let mut x = vec![1.0, g];
            x.extend_from_slice(&w);
            if config.basis.per_arm {
                x.extend(w.iter().map(|v| g * v));
            }
            x.extend(cov_cols.iter().map(|&c| s.covariates[c]));
            rows.push(ObsRow { subject: i, t, x, y: y - common.offset });
        }
    }
    if rows.is_empty() {
        return Err(Error::data("every outcome cell lacks its surrogate history"));
    }
    Ok(ModelSpec {
        kind: ModelKind::Conditional,
        prior: make_prior(&layout, common.var, options),
        layout,
        options: options.clone(),
        frozen: None,
        outcome_offset: common.offset,
        outcome_sd: common.var.sqrt(),
        conditional: Some(config.clone()),
        covariates: config.covariates.clone(),
        dropped_cells: dropped,
        n_times: panel.n_times(),
        arms: panel.subjects().iter().map(|s| s.arm).collect(),
        rows,
    })
}
