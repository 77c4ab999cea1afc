//! Kalman filtering and smoothing for the replicated-series DLM with
//! identity evolution and discount-factor evolution covariances.
//!
//! Two engines compute the same posterior:
//!
//! * [`kalman_filter`] / [`kalman_smoother`]: the textbook dense recursion
//!   over the full state (shared block plus one level per subject), with
//!   sequential scalar Joseph-form updates. Cost grows like N^3 per step.
//! * [`fit`]: works on the shared trajectory in information form. Each
//!   subject's level is integrated out by a scalar filter whose mean is affine
//!   in the shared trajectory, so subjects only ever add rank-one terms to a
//!   (shared x time)-sized precision matrix. This is also what the bootstrap
//!   decomposition reuses.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{ConditionalConfig, FrozenEvolution, ModelKind, ModelOptions, ModelSpec, StateLayout};
use crate::error::{Error, Result};
use crate::linalg::{self, PackedSym};

/// Mean and covariance over a block of states at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub t: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(t: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::config("belief mean and covariance dimensions differ"));
        }
        Ok(GaussianBelief { t, mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sub-belief over the listed coordinates.
    pub fn marginal(&self, idx: &[usize]) -> GaussianBelief {
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.cov[(idx[a], idx[b])]);
        GaussianBelief { t: self.t, mean, cov }
    }

    /// True when the covariance is symmetric (relative 1e-10) and has no
    /// eigenvalue below -1e-10 * trace.
    pub fn is_valid_covariance(&self) -> bool {
        let c = &self.cov;
        let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..c.nrows() {
            for j in 0..i {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-10 * scale {
                    return false;
                }
            }
        }
        let eig = c.clone().symmetric_eigen();
        let floor = -1e-10 * c.trace().abs();
        eig.eigenvalues.iter().all(|&e| e >= floor)
    }
}

/// Identity-evolution prediction with a single discount: R = C / d.
pub fn discount_predict(filtered: &GaussianBelief, discount: f64) -> Result<GaussianBelief> {
    let all: Vec<usize> = (0..filtered.dim()).collect();
    discount_predict_blocks(filtered, &[(all, discount)])
}

/// Blockwise discounting: for each (indices, d) block the covariance block is
/// divided by d, which equals adding W = ((1 - d)/d) C on that block.
/// Cross-block covariances and unlisted coordinates are unchanged.
pub fn discount_predict_blocks(filtered: &GaussianBelief, blocks: &[(Vec<usize>, f64)]) -> Result<GaussianBelief> {
    let mut cov = filtered.cov.clone();
    for (idx, d) in blocks {
        if !(*d > 0.0 && *d <= 1.0) {
            return Err(Error::config(format!("discount {d} outside (0, 1]")));
        }
        if idx.iter().any(|&i| i >= filtered.dim()) {
            return Err(Error::config("discount block index out of range"));
        }
        if *d == 1.0 {
            continue;
        }
        let f = (1.0 - d) / d;
        for &i in idx {
            for &j in idx {
                cov[(i, j)] += f * filtered.cov[(i, j)];
            }
        }
    }
    Ok(GaussianBelief { t: filtered.t + 1, mean: filtered.mean.clone(), cov })
}

/// Precision-weighted product of Gaussians over the same block and time.
pub fn gaussian_precision_product(beliefs: &[GaussianBelief]) -> Result<GaussianBelief> {
    let first = beliefs.first().ok_or_else(|| Error::config("precision product of zero beliefs"))?;
    let n = first.dim();
    let mut prec = DMatrix::zeros(n, n);
    let mut info = DVector::zeros(n);
    for b in beliefs {
        if b.dim() != n || b.t != first.t {
            return Err(Error::config("beliefs differ in dimension or time index"));
        }
        let p = linalg::spd_inverse(&b.cov, "precision product input")?;
        info += &p * &b.mean;
        prec += p;
    }
    let cov = linalg::spd_inverse(&prec, "precision product")?;
    let mean = &cov * info;
    Ok(GaussianBelief { t: first.t, mean, cov })
}

// ---------------------------------------------------------------------------
// Dense reference engine
// ---------------------------------------------------------------------------

/// One-step forecast residual of a single observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub subject: usize,
    pub innovation: f64,
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct FilterStep {
    pub predicted: GaussianBelief,
    pub filtered: GaussianBelief,
    pub residuals: Vec<Residual>,
}

impl FilterStep {
    pub fn n_obs(&self) -> usize {
        self.residuals.len()
    }
}

/// Output of [`kalman_filter`]: beliefs over the full state for t = 0..T.
#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub steps: Vec<FilterStep>,
    pub kind: ModelKind,
    pub layout: StateLayout,
    pub options: ModelOptions,
    pub evolution: FrozenEvolution,
    pub outcome_offset: f64,
    pub outcome_sd: f64,
    pub conditional: Option<ConditionalConfig>,
}

fn dense_blocks(spec: &ModelSpec) -> Vec<(Vec<usize>, f64)> {
    let mut blocks = spec.layout.evolution_blocks(&spec.options.discounts);
    let d = spec.options.discounts.subject;
    if d < 1.0 {
        for i in 0..spec.n_subjects() {
            blocks.push((vec![spec.layout.level_index(i)], d));
        }
    }
    blocks
}

fn check_rows(spec: &ModelSpec) -> Result<()> {
    let s = spec.layout.shared_dim();
    for r in spec.rows() {
        if r.x.len() != s {
            return Err(Error::config(format!(
                "design row for subject {} at t={} has {} entries, layout has {s}",
                r.subject,
                r.t,
                r.x.len()
            )));
        }
        if r.subject >= spec.n_subjects() || r.t >= spec.n_times() {
            return Err(Error::config("design row outside the panel"));
        }
        if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite observation for subject {} at t={}", r.subject, r.t)));
        }
    }
    if let Some(f) = &spec.frozen {
        if f.shared_w.len() != spec.n_times() || f.level_w.len() != spec.n_subjects() {
            return Err(Error::config("frozen evolution does not match the model dimensions"));
        }
        if f.moving != spec.layout.moving_states(&spec.options.discounts) {
            return Err(Error::config("frozen evolution moving states differ from the discount blocks"));
        }
    }
    Ok(())
}

/// Forward pass of the dense filter. At each t the prediction step applies
/// the discount blocks (or the frozen W_t), then observations at t are
/// absorbed one at a time.
pub fn kalman_filter(spec: &ModelSpec) -> Result<FilterTrace> {
    check_rows(spec)?;
    let s = spec.layout.shared_dim();
    let n = spec.layout.total_dim();
    let moving = spec.layout.moving_states(&spec.options.discounts);
    let blocks = dense_blocks(spec);
    let mut diag = spec.prior.shared_var.clone();
    diag.extend(std::iter::repeat(spec.prior.level_var).take(spec.n_subjects()));
    let mut belief = GaussianBelief { t: 0, mean: DVector::zeros(n), cov: DMatrix::from_diagonal(&DVector::from_vec(diag)) };
    let mut evolution = FrozenEvolution {
        moving: moving.clone(),
        shared_w: vec![DMatrix::zeros(0, 0)],
        level_w: vec![vec![0.0]; spec.n_subjects()],
    };
    let rows = spec.rows();
    let mut next = 0;
    let mut steps = Vec::with_capacity(spec.n_times());
    for t in 0..spec.n_times() {
        let predicted = if t == 0 {
            belief.clone()
        } else {
            let p = match &spec.frozen {
                None => discount_predict_blocks(&belief, &blocks)?,
                Some(f) => {
                    let mut p = belief.clone();
                    p.t = t;
                    for (a, &i) in moving.iter().enumerate() {
                        for (b, &j) in moving.iter().enumerate() {
                            p.cov[(i, j)] += f.shared_w[t][(a, b)];
                        }
                    }
                    for i in 0..spec.n_subjects() {
                        let k = spec.layout.level_index(i);
                        p.cov[(k, k)] += f.level_w[i][t];
                    }
                    p
                }
            };
            evolution.shared_w.push(DMatrix::from_fn(moving.len(), moving.len(), |a, b| {
                p.cov[(moving[a], moving[b])] - belief.cov[(moving[a], moving[b])]
            }));
            for i in 0..spec.n_subjects() {
                let k = spec.layout.level_index(i);
                evolution.level_w[i].push(p.cov[(k, k)] - belief.cov[(k, k)]);
            }
            p
        };
        let mut cur = predicted.clone();
        let mut residuals = Vec::new();
        while next < rows.len() && rows[next].t == t {
            let r = &rows[next];
            next += 1;
            let lvl = spec.layout.level_index(r.subject);
            // u = C h with h = (x on shared, 1 on the subject's level)
            let mut u = DVector::zeros(n);
            for (k, &xk) in r.x.iter().enumerate() {
                if xk != 0.0 {
                    u.axpy(xk, &cur.cov.column(k), 1.0);
                }
            }
            u += cur.cov.column(lvl);
            let fitted: f64 = r.x.iter().enumerate().map(|(k, xk)| xk * cur.mean[k]).sum::<f64>() + cur.mean[lvl];
            let hu: f64 = r.x.iter().enumerate().map(|(k, xk)| xk * u[k]).sum::<f64>() + u[lvl];
            let q = hu + spec.obs_var(r.subject);
            if !(q > 0.0) {
                return Err(Error::numerical(format!("non-positive forecast variance at t={t}")));
            }
            let e = r.y - fitted;
            let k = &u / q;
            cur.mean.axpy(e, &k, 1.0);
            // Joseph form for a scalar observation: C - K u' - u K' + q K K'
            cur.cov.ger(-1.0, &k, &u, 1.0);
            cur.cov.ger(-1.0, &u, &k, 1.0);
            cur.cov.ger(q, &k, &k, 1.0);
            linalg::symmetrize(&mut cur.cov);
            residuals.push(Residual { subject: r.subject, innovation: e, variance: q });
        }
        let _ = s;
        belief = cur.clone();
        steps.push(FilterStep { predicted, filtered: cur, residuals });
    }
    Ok(FilterTrace {
        steps,
        kind: spec.kind,
        layout: spec.layout.clone(),
        options: spec.options.clone(),
        evolution,
        outcome_offset: spec.outcome_offset,
        outcome_sd: spec.outcome_sd,
        conditional: spec.conditional.clone(),
    })
}

/// Fixed-interval (RTS) smoother over a dense filter trace. With identity
/// evolution the gain is C_t R_{t+1}^{-1}.
pub fn kalman_smoother(trace: &FilterTrace) -> Result<SmoothedFit> {
    let nt = trace.steps.len();
    if nt == 0 {
        return Err(Error::config("empty filter trace"));
    }
    let mut smoothed = vec![trace.steps[nt - 1].filtered.clone(); nt];
    for t in (0..nt - 1).rev() {
        let f = &trace.steps[t].filtered;
        let r = &trace.steps[t + 1].predicted;
        let chol = linalg::cholesky(&r.cov, &format!("smoother predictive covariance at t={}", t + 1))?;
        // gain' = R^{-1} C
        let gain_t = chol.solve(&f.cov);
        let gain = gain_t.transpose();
        let dm = &smoothed[t + 1].mean - &r.mean;
        let dc = &smoothed[t + 1].cov - &r.cov;
        let mean = &f.mean + &gain * dm;
        let mut cov = &f.cov + &gain * dc * &gain_t;
        linalg::symmetrize(&mut cov);
        smoothed[t] = GaussianBelief { t, mean, cov };
    }
    let s = trace.layout.shared_dim();
    let shared_idx: Vec<usize> = (0..s).collect();
    let shared: Vec<GaussianBelief> = smoothed.iter().map(|b| b.marginal(&shared_idx)).collect();
    let filtered_shared = trace.steps.iter().map(|st| st.filtered.marginal(&shared_idx)).collect();
    let n_sub = trace.layout.n_subjects();
    let levels = (0..n_sub)
        .map(|i| {
            let k = trace.layout.level_index(i);
            smoothed.iter().map(|b| (b.mean[k], b.cov[(k, k)])).collect()
        })
        .collect();
    let n_obs = trace.steps.iter().map(|s| s.n_obs()).sum();
    Ok(SmoothedFit::assemble(
        trace.kind,
        trace.layout.clone(),
        shared,
        filtered_shared,
        levels,
        trace.evolution.clone(),
        FitLog {
            options: trace.options.clone(),
            n_obs,
            outcome_offset: trace.outcome_offset,
            outcome_sd: trace.outcome_sd,
            conditional: trace.conditional.clone(),
            covariates: trace.layout.names().iter().filter_map(|n| n.strip_prefix("x[").and_then(|r| r.strip_suffix(']'))).map(String::from).collect(),
            dropped_cells: 0,
            engine: Engine::Dense,
        },
    ))
}

/// Full dense smoothed beliefs (all states), for tests and diagnostics.
pub fn kalman_smoother_full(trace: &FilterTrace) -> Result<Vec<GaussianBelief>> {
    let nt = trace.steps.len();
    let mut out = vec![trace.steps[nt - 1].filtered.clone(); nt];
    for t in (0..nt.saturating_sub(1)).rev() {
        let f = &trace.steps[t].filtered;
        let r = &trace.steps[t + 1].predicted;
        let gain_t = linalg::cholesky(&r.cov, "smoother")?.solve(&f.cov);
        let gain = gain_t.transpose();
        let mean = &f.mean + &gain * (&out[t + 1].mean - &r.mean);
        let mut cov = &f.cov + &gain * (&out[t + 1].cov - &r.cov) * &gain_t;
        linalg::symmetrize(&mut cov);
        out[t] = GaussianBelief { t, mean, cov };
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectory information engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Dense,
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub options: ModelOptions,
    pub n_obs: usize,
    pub outcome_offset: f64,
    pub outcome_sd: f64,
    pub conditional: Option<ConditionalConfig>,
    pub covariates: Vec<String>,
    pub dropped_cells: usize,
    pub engine: Engine,
}

impl FitLog {
    fn from_spec(spec: &ModelSpec, n_obs: usize, engine: Engine) -> FitLog {
        FitLog {
            options: spec.options.clone(),
            n_obs,
            outcome_offset: spec.outcome_offset,
            outcome_sd: spec.outcome_sd,
            conditional: spec.conditional.clone(),
            covariates: spec.covariates.clone(),
            dropped_cells: spec.dropped_cells,
            engine,
        }
    }
}

/// Smoothed output of either engine.
#[derive(Debug, Clone)]
pub struct SmoothedFit {
    pub kind: ModelKind,
    pub layout: StateLayout,
    /// Smoothed beliefs over the shared block, t = 0..T.
    pub shared: Vec<GaussianBelief>,
    /// Filtered beliefs over the shared block, t = 0..T.
    pub filtered_shared: Vec<GaussianBelief>,
    /// Smoothed (mean, variance) of each subject's level, t = 0..T.
    pub levels: Vec<Vec<(f64, f64)>>,
    /// Smoothed mean path per named shared state (intercept on the outcome scale).
    pub paths: BTreeMap<String, Vec<f64>>,
    /// Evolution covariances actually used; feed back with `ModelSpec::with_frozen`.
    pub evolution: FrozenEvolution,
    pub log: FitLog,
}

impl SmoothedFit {
    fn assemble(
        kind: ModelKind,
        layout: StateLayout,
        shared: Vec<GaussianBelief>,
        filtered_shared: Vec<GaussianBelief>,
        levels: Vec<Vec<(f64, f64)>>,
        evolution: FrozenEvolution,
        log: FitLog,
    ) -> SmoothedFit {
        let mut paths = BTreeMap::new();
        for (k, name) in layout.names().iter().enumerate() {
            let mut p: Vec<f64> = shared.iter().map(|b| b.mean[k]).collect();
            if name == "intercept" {
                for v in &mut p {
                    *v += log.outcome_offset;
                }
            }
            paths.insert(name.clone(), p);
        }
        SmoothedFit { kind, layout, shared, filtered_shared, levels, paths, evolution, log }
    }

    pub fn path(&self, name: &str) -> Result<&[f64]> {
        self.paths
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::config(format!("fit has no state named '{name}'")))
    }

    pub fn n_times(&self) -> usize {
        self.shared.len()
    }
}

/// Coordinates of the shared trajectory: static states once, moving states
/// once per time point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_shared: usize,
    n_times: usize,
    static_states: Vec<usize>,
    moving: Vec<usize>,
    /// For each shared state: (is_moving, position within its group).
    slot: Vec<(bool, usize)>,
}

impl Trajectory {
    pub fn new(spec: &ModelSpec) -> Trajectory {
        let moving = spec.layout.moving_states(&spec.options.discounts);
        let n_shared = spec.layout.shared_dim();
        let static_states: Vec<usize> = (0..n_shared).filter(|k| !moving.contains(k)).collect();
        let mut slot = vec![(false, 0); n_shared];
        for (p, &k) in static_states.iter().enumerate() {
            slot[k] = (false, p);
        }
        for (p, &k) in moving.iter().enumerate() {
            slot[k] = (true, p);
        }
        Trajectory { n_shared, n_times: spec.n_times(), static_states, moving, slot }
    }

    pub fn dim(&self) -> usize {
        self.static_states.len() + self.moving.len() * self.n_times
    }

    /// Length of the prefix covering times 0..=t.
    pub fn prefix(&self, t: usize) -> usize {
        self.static_states.len() + self.moving.len() * (t + 1)
    }

    pub fn coord(&self, t: usize, state: usize) -> usize {
        match self.slot[state] {
            (false, p) => p,
            (true, p) => self.static_states.len() + t * self.moving.len() + p,
        }
    }

    /// Trajectory coordinates of the whole shared block at time t, in layout order.
    pub fn coords_at(&self, t: usize) -> Vec<usize> {
        (0..self.n_shared).map(|k| self.coord(t, k)).collect()
    }

    pub fn moving(&self) -> &[usize] {
        &self.moving
    }

    fn moving_coords(&self, t: usize) -> std::ops::Range<usize> {
        let s = self.static_states.len() + t * self.moving.len();
        s..s + self.moving.len()
    }

    fn scatter(&self, t: usize, x: &[f64], z: &mut [f64]) {
        for (k, &v) in x.iter().enumerate() {
            z[self.coord(t, k)] = v;
        }
    }
}

/// Prior precision over the trajectory for a given evolution.
pub(crate) fn prior_precision(spec: &ModelSpec, traj: &Trajectory, shared_w: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let d = traj.dim();
    let mut q = DMatrix::zeros(d, d);
    for k in 0..traj.n_shared {
        let c = traj.coord(0, k);
        q[(c, c)] += 1.0 / spec.prior.shared_var[k];
    }
    add_increment_precisions(&mut q, traj, shared_w, 1..traj.n_times)?;
    Ok(q)
}

fn add_increment_precisions(
    q: &mut DMatrix<f64>,
    traj: &Trajectory,
    shared_w: &[DMatrix<f64>],
    times: std::ops::Range<usize>,
) -> Result<()> {
    for t in times {
        add_increment(q, traj, &shared_w[t], t)?;
    }
    Ok(())
}

/// Random-walk increment prior between copies t-1 and t.
fn add_increment(q: &mut DMatrix<f64>, traj: &Trajectory, w: &DMatrix<f64>, t: usize) -> Result<()> {
    if traj.moving.is_empty() {
        return Ok(());
    }
    let wi = linalg::spd_inverse(w, &format!("evolution covariance at t={t}"))?;
    let a = traj.moving_coords(t - 1);
    let b = traj.moving_coords(t);
    for i in 0..wi.nrows() {
        for j in 0..wi.ncols() {
            let v = wi[(i, j)];
            q[(a.start + i, a.start + j)] += v;
            q[(b.start + i, b.start + j)] += v;
            q[(a.start + i, b.start + j)] -= v;
            q[(b.start + i, a.start + j)] -= v;
        }
    }
    Ok(())
}

/// Scalar filter for one subject's level, conditional on the shared
/// trajectory theta: level mean a + g'theta, variance v.
#[derive(Debug, Clone)]
pub(crate) struct LevelProfile {
    pub a: f64,
    pub g: Vec<f64>,
    pub v: f64,
}

impl LevelProfile {
    pub fn new(dim: usize, prior_var: f64) -> Self {
        LevelProfile { a: 0.0, g: vec![0.0; dim], v: prior_var }
    }

    /// Absorb y = x'theta + level + eps. Returns the regressor z = x + g,
    /// residual r = y - a and its variance q; the caller adds z z'/q and z r/q.
    pub fn update(&mut self, z: &mut [f64], y: f64, obs_var: f64, len: usize) -> (f64, f64) {
        for (zi, gi) in z[..len].iter_mut().zip(&self.g[..len]) {
            *zi += gi;
        }
        let r = y - self.a;
        let q = self.v + obs_var;
        let k = self.v / q;
        self.a += k * r;
        for (gi, zi) in self.g[..len].iter_mut().zip(&z[..len]) {
            *gi -= k * zi;
        }
        self.v = self.v * obs_var / q;
        (r, q)
    }
}

/// Per-subject history of the level filter, kept for level smoothing.
#[derive(Debug, Clone)]
struct LevelHistory {
    filtered: Vec<LevelProfile>,
    predicted_var: Vec<f64>,
}

struct EngineOutput {
    precision: DMatrix<f64>,
    info: DVector<f64>,
    filtered_shared: Vec<GaussianBelief>,
    histories: Vec<LevelHistory>,
    evolution: FrozenEvolution,
    n_obs: usize,
}

fn run_engine(spec: &ModelSpec, traj: &Trajectory) -> Result<EngineOutput> {
    check_rows(spec)?;
    let dim = traj.dim();
    let nt = spec.n_times();
    let nsub = spec.n_subjects();
    let blocks = spec.layout.evolution_blocks(&spec.options.discounts);
    let d_sub = spec.options.discounts.subject;
    let mut lam = DMatrix::zeros(dim, dim);
    let mut info = DVector::zeros(dim);
    for k in 0..traj.n_shared {
        let c = traj.coord(0, k);
        lam[(c, c)] += 1.0 / spec.prior.shared_var[k];
    }
    let mut profiles: Vec<LevelProfile> = (0..nsub).map(|_| LevelProfile::new(dim, spec.prior.level_var)).collect();
    let mut histories: Vec<LevelHistory> =
        (0..nsub).map(|_| LevelHistory { filtered: Vec::with_capacity(nt), predicted_var: Vec::with_capacity(nt) }).collect();
    let mut evolution = FrozenEvolution {
        moving: traj.moving.clone(),
        shared_w: vec![DMatrix::zeros(0, 0)],
        level_w: vec![vec![0.0]; nsub],
    };
    let mut filtered_shared = Vec::with_capacity(nt);
    let mut prev_cov: Option<DMatrix<f64>> = None;
    let rows = spec.rows();
    let mut next = 0;
    let mut z = vec![0.0; dim];
    let mut n_obs = 0;
    for t in 0..nt {
        let len = traj.prefix(t);
        if t >= 1 {
            let m = traj.moving.len();
            let w = match &spec.frozen {
                Some(f) => f.shared_w[t].clone(),
                None => {
                    let p = prev_cov.as_ref().expect("filtered covariance of the previous step");
                    let base = traj.moving_coords(t - 1).start;
                    let mut w = DMatrix::zeros(m, m);
                    let mut offset = 0;
                    for (idx, d) in &blocks {
                        let f = (1.0 - d) / d;
                        for a in 0..idx.len() {
                            for b in 0..idx.len() {
                                w[(offset + a, offset + b)] = f * p[(base + offset + a, base + offset + b)];
                            }
                        }
                        offset += idx.len();
                    }
                    w
                }
            };
            add_increment(&mut lam, traj, &w, t)?;
            evolution.shared_w.push(w);
            let plen = traj.prefix(t - 1);
            for (i, prof) in profiles.iter_mut().enumerate() {
                let wi = match &spec.frozen {
                    Some(f) => f.level_w[i][t],
                    None if d_sub < 1.0 => {
                        let p = prev_cov.as_ref().expect("previous covariance");
                        let g = &prof.g[..plen];
                        let mut quad = 0.0;
                        for b in 0..plen {
                            if g[b] == 0.0 {
                                continue;
                            }
                            let col = p.column(b);
                            let mut s = 0.0;
                            for a in 0..plen {
                                s += g[a] * col[a];
                            }
                            quad += s * g[b];
                        }
                        (1.0 - d_sub) / d_sub * (prof.v + quad)
                    }
                    None => 0.0,
                };
                prof.v += wi;
                evolution.level_w[i].push(wi);
            }
        }
        for (i, prof) in profiles.iter().enumerate() {
            histories[i].predicted_var.push(prof.v);
        }
        while next < rows.len() && rows[next].t == t {
            let r = &rows[next];
            next += 1;
            n_obs += 1;
            z[..len].iter_mut().for_each(|v| *v = 0.0);
            traj.scatter(t, &r.x, &mut z);
            let (res, q) = profiles[r.subject].update(&mut z, r.y, spec.obs_var(r.subject), len);
            if !(q > 0.0) {
                return Err(Error::numerical(format!("non-positive forecast variance at t={t}")));
            }
            let mut view = lam.view_mut((0, 0), (len, len));
            let zv = nalgebra::DVectorView::from_slice(&z[..len], len);
            view.ger(1.0 / q, &zv, &zv, 1.0);
            let mut iv = info.rows_mut(0, len);
            iv.axpy(res / q, &zv, 1.0);
        }
        for (i, prof) in profiles.iter().enumerate() {
            histories[i].filtered.push(prof.clone());
        }
        let sub = lam.view((0, 0), (len, len)).into_owned();
        let p = linalg::spd_inverse(&sub, &format!("filtered precision at t={t}"))?;
        let mean = &p * info.rows(0, len);
        let coords = traj.coords_at(t);
        filtered_shared.push(GaussianBelief {
            t,
            mean: DVector::from_iterator(coords.len(), coords.iter().map(|&c| mean[c])),
            cov: DMatrix::from_fn(coords.len(), coords.len(), |a, b| p[(coords[a], coords[b])]),
        });
        prev_cov = Some(p);
    }
    linalg::symmetrize(&mut lam);
    Ok(EngineOutput { precision: lam, info, filtered_shared, histories, evolution, n_obs })
}

/// Smoothed fit through the trajectory information engine.
pub fn fit(spec: &ModelSpec) -> Result<SmoothedFit> {
    let traj = Trajectory::new(spec);
    let out = run_engine(spec, &traj)?;
    let cov = linalg::spd_inverse(&out.precision, "smoothed trajectory precision")?;
    let mean = &cov * &out.info;
    let nt = spec.n_times();
    let shared: Vec<GaussianBelief> = (0..nt)
        .map(|t| {
            let c = traj.coords_at(t);
            GaussianBelief {
                t,
                mean: DVector::from_iterator(c.len(), c.iter().map(|&k| mean[k])),
                cov: DMatrix::from_fn(c.len(), c.len(), |a, b| cov[(c[a], c[b])]),
            }
        })
        .collect();
    let levels = out.histories.iter().map(|h| smooth_level(h, &traj, &mean, &cov)).collect();
    Ok(SmoothedFit::assemble(
        spec.kind,
        spec.layout.clone(),
        shared,
        out.filtered_shared,
        levels,
        out.evolution,
        FitLog::from_spec(spec, out.n_obs, Engine::Trajectory),
    ))
}

/// RTS pass of the level filter (affine in theta), then integrate theta out.
fn smooth_level(h: &LevelHistory, traj: &Trajectory, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let nt = h.filtered.len();
    let dim = traj.dim();
    let mut a = h.filtered[nt - 1].a;
    let mut g = h.filtered[nt - 1].g.clone();
    let mut v = h.filtered[nt - 1].v;
    let mut out = vec![(0.0, 0.0); nt];
    let summarize = |a: f64, g: &[f64], v: f64| {
        let gv = DVector::from_column_slice(g);
        let m = a + gv.dot(mean);
        let var = v + (cov * &gv).dot(&gv);
        (m, var)
    };
    out[nt - 1] = summarize(a, &g, v);
    for t in (0..nt - 1).rev() {
        let f = &h.filtered[t];
        let pv = h.predicted_var[t + 1];
        let j = f.v / pv;
        a = f.a + j * (a - f.a);
        for k in 0..dim {
            g[k] = f.g[k] + j * (g[k] - f.g[k]);
        }
        v = f.v + j * j * (v - pv);
        out[t] = summarize(a, &g, v);
    }
    out
}

// ---------------------------------------------------------------------------
// Per-subject decomposition
// ---------------------------------------------------------------------------

/// Likelihood factor of one subject over the shared trajectory (its level
/// integrated out), together with its prior share. The posterior p_i has
/// precision share * Q + information and linear term `score`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPosterior {
    pub subject: usize,
    pub arm: u8,
    pub prior_share: f64,
    pub information: PackedSym,
    pub score: DVector<f64>,
    /// Per-time marginals of p_i over the shared block (empty unless requested).
    pub shared: Vec<GaussianBelief>,
}

/// Shared pieces needed to turn subject factors into posteriors.
#[derive(Debug, Clone)]
pub struct TrajectoryPrior {
    pub trajectory: Trajectory,
    pub precision: DMatrix<f64>,
}

impl TrajectoryPrior {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let f = spec.frozen.as_ref().ok_or_else(|| Error::config("decomposition needs a frozen evolution (fit first)"))?;
        let trajectory = Trajectory::new(spec);
        let precision = prior_precision(spec, &trajectory, &f.shared_w)?;
        Ok(TrajectoryPrior { trajectory, precision })
    }

    /// Per-time shared-block marginals of the Gaussian with the given precision and linear term.
    pub fn shared_beliefs(&self, precision: &DMatrix<f64>, score: &DVector<f64>) -> Result<Vec<GaussianBelief>> {
        let cov = linalg::spd_inverse(precision, "trajectory precision")?;
        let mean = &cov * score;
        Ok((0..self.trajectory.n_times)
            .map(|t| {
                let c = self.trajectory.coords_at(t);
                GaussianBelief {
                    t,
                    mean: DVector::from_iterator(c.len(), c.iter().map(|&k| mean[k])),
                    cov: DMatrix::from_fn(c.len(), c.len(), |a, b| cov[(c[a], c[b])]),
                }
            })
            .collect())
    }
}

/// Likelihood information of one subject under the frozen evolution.
pub fn subject_information(spec: &ModelSpec, traj: &Trajectory, subject: usize) -> Result<(PackedSym, DVector<f64>)> {
    let f = spec.frozen.as_ref().ok_or_else(|| Error::config("decomposition needs a frozen evolution (fit first)"))?;
    let dim = traj.dim();
    let mut lam = PackedSym::zeros(dim);
    let mut info = DVector::zeros(dim);
    let mut prof = LevelProfile::new(dim, spec.prior.level_var);
    let mut z = vec![0.0; dim];
    let v = spec.obs_var(subject);
    for t in 0..spec.n_times() {
        if t >= 1 {
            prof.v += f.level_w[subject][t];
        }
        if let Some(r) = spec.row(subject, t) {
            let len = traj.prefix(t);
            z[..len].iter_mut().for_each(|x| *x = 0.0);
            traj.scatter(t, &r.x, &mut z);
            let (res, q) = prof.update(&mut z, r.y, v, len);
            lam.rank1(&z, q, len);
            for k in 0..len {
                info[k] += z[k] * res / q;
            }
        }
    }
    Ok((lam, info))
}

/// p_i for one subject: prior raised to `prior_share`, times the subject's
/// likelihood. Requires a frozen evolution (from a full fit).
pub fn fit_subject_posterior(spec: &ModelSpec, subject: usize, prior_share: f64) -> Result<SubjectPosterior> {
    if subject >= spec.n_subjects() {
        return Err(Error::data(format!("subject index {subject} not in panel")));
    }
    if !(prior_share > 0.0) {
        return Err(Error::config("prior share must be positive"));
    }
    let tp = TrajectoryPrior::new(spec)?;
    let (information, score) = subject_information(spec, &tp.trajectory, subject)?;
    let prec = &tp.precision * prior_share + information.to_dense();
    let shared = tp.shared_beliefs(&prec, &score)?;
    Ok(SubjectPosterior { subject, arm: spec.arm(subject), prior_share, information, score, shared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_marginal, DiscountConfig, ModelOptions, Panel, Subject, SubjectSeries};

    fn small_panel() -> Panel {
        let vals = [
            [0.3, 0.5, 0.9, 1.2],
            [0.1, 0.0, 0.4, 0.2],
            [1.1, 1.9, 2.2, 3.0],
            [0.7, 1.4, 1.5, 2.6],
        ];
        let series = vals
            .iter()
            .enumerate()
            .map(|(i, v)| SubjectSeries {
                subject: Subject { id: format!("p{i}"), arm: (i / 2) as u8, covariates: vec![] },
                outcome: v.iter().map(|&x| Some(x)).collect(),
                surrogate: vec![Some(0.0); 4],
            })
            .collect();
        Panel::new(vec![], 4, series).unwrap()
    }

    #[test]
    fn discount_half_doubles_identity() {
        let b = GaussianBelief::new(0, DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let r = discount_predict(&b, 0.5).unwrap();
        assert!((r.cov.clone() - DMatrix::identity(2, 2) * 2.0).norm() < 1e-15);
        assert_eq!(discount_predict(&b, 1.0).unwrap().cov, b.cov);
        assert!(discount_predict(&b, 0.0).is_err());
        assert!(discount_predict(&b, 1.5).is_err());
    }

    #[test]
    fn discount_matches_additive_form() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let b = GaussianBelief::new(3, DVector::from_vec(vec![1.0, 2.0]), c.clone()).unwrap();
        let r = discount_predict(&b, 0.9).unwrap();
        let w = &c * ((1.0 - 0.9) / 0.9);
        assert!((&r.cov - (&c + w)).norm() < 1e-14);
        assert!((r.cov[(0, 0)] - 4.0 / 0.9).abs() < 1e-14);
        assert_eq!(r.mean, b.mean);
    }

    #[test]
    fn precision_product_examples() {
        let a = GaussianBelief::new(0, DVector::from_vec(vec![0.0]), DMatrix::identity(1, 1)).unwrap();
        let b = GaussianBelief::new(0, DVector::from_vec(vec![2.0]), DMatrix::identity(1, 1)).unwrap();
        let p = gaussian_precision_product(&[a.clone(), b]).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15 && (p.cov[(0, 0)] - 0.5).abs() < 1e-15);
        let one = gaussian_precision_product(std::slice::from_ref(&a)).unwrap();
        assert!((one.cov - a.cov).norm() < 1e-15);
        assert!(gaussian_precision_product(&[]).is_err());
    }

    #[test]
    fn engines_agree_on_small_panel() {
        let p = small_panel();
        let spec = build_marginal(&p, &[], &ModelOptions::with_discounts(DiscountConfig::uniform(0.9))).unwrap();
        let dense = kalman_smoother(&kalman_filter(&spec).unwrap()).unwrap();
        let traj = fit(&spec).unwrap();
        for t in 0..4 {
            for k in 0..2 {
                let a = dense.shared[t].mean[k];
                let b = traj.shared[t].mean[k];
                assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "t={t} k={k}: {a} vs {b}");
            }
            for i in 0..4 {
                let (a, b) = (dense.levels[i][t].0, traj.levels[i][t].0);
                assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0), "level {i} t={t}: {a} vs {b}");
            }
        }
        for t in 1..4 {
            assert!((&dense.evolution.shared_w[t] - &traj.evolution.shared_w[t]).norm() <= 1e-6 * dense.evolution.shared_w[t].norm());
        }
    }

    #[test]
    fn missing_cell_keeps_predictive_belief() {
        let p = small_panel();
        let mut series: Vec<_> = (0..4).map(|i| p.series(i)).collect();
        series[2].outcome[2] = None;
        let p = Panel::new(vec![], 4, series).unwrap();
        let spec = build_marginal(&p, &[], &ModelOptions::default()).unwrap();
        let trace = kalman_filter(&spec).unwrap();
        // nothing observed for subject 2 at t=2 but the other subjects still update it via the shared block
        let k = spec.layout.level_index(2);
        let st = &trace.steps[2];
        assert_eq!(st.n_obs(), 3);
        assert!(st.filtered.cov[(k, k)] <= st.predicted.cov[(k, k)]);
    }

    #[test]
    fn subject_without_data_is_pure_prediction() {
        let p = small_panel();
        let mut series: Vec<_> = (0..4).map(|i| p.series(i)).collect();
        for s in &mut series {
            s.outcome[2] = None;
        }
        let p = Panel::new(vec![], 4, series).unwrap();
        let spec = build_marginal(&p, &[], &ModelOptions::default()).unwrap();
        let trace = kalman_filter(&spec).unwrap();
        assert_eq!(trace.steps[2].filtered, trace.steps[2].predicted);
    }

    #[test]
    fn single_time_point_smoother_is_filter() {
        let p = small_panel();
        let series: Vec<_> = (0..4)
            .map(|i| {
                let mut s = p.series(i);
                s.outcome.truncate(1);
                s.surrogate.truncate(1);
                s
            })
            .collect();
        let p1 = Panel::new(vec![], 1, series).unwrap();
        let spec = build_marginal(&p1, &[], &ModelOptions::default()).unwrap();
        let trace = kalman_filter(&spec).unwrap();
        let sm = kalman_smoother(&trace).unwrap();
        assert_eq!(sm.shared[0], trace.steps[0].filtered.marginal(&[0, 1]));
    }

    #[test]
    fn unit_discount_gives_constant_paths() {
        let p = small_panel();
        let spec = build_marginal(&p, &[], &ModelOptions::with_discounts(DiscountConfig::uniform(1.0))).unwrap();
        let f = fit(&spec).unwrap();
        let d = f.path("treatment").unwrap();
        assert!(d.iter().all(|v| (v - d[0]).abs() < 1e-12));
        assert!(f.evolution.level_w.iter().flatten().all(|w| *w == 0.0));
    }

    #[test]
    fn single_subject_posterior_is_the_full_fit() {
        let p = small_panel();
        let one = Panel::new(vec![], 4, vec![p.series(0), p.series(3)]).unwrap();
        let spec = build_marginal(&one, &[], &ModelOptions::default()).unwrap();
        let full = fit(&spec).unwrap();
        let frozen = spec.with_frozen(full.evolution.clone());
        let single = frozen.restricted(&[0], 1.0).unwrap();
        let post = fit_subject_posterior(&single, 0, 1.0).unwrap();
        let direct = fit(&single).unwrap();
        for t in 0..4 {
            assert!((&post.shared[t].mean - &direct.shared[t].mean).norm() < 1e-9 * direct.shared[t].mean.norm().max(1.0));
        }
    }
}
