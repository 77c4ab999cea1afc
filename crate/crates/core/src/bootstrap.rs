//! Subject-level nonparametric bootstrap by recombining per-subject
//! posterior factors.
//!
//! Under the fixed-W model recorded by the full fit, the posterior of the
//! shared trajectory is Gaussian with precision Q + sum_i Lambda_i and linear
//! term sum_i h_i, where (Lambda_i, h_i) is subject i's likelihood factor
//! with its level integrated out. A resampled panel with multiplicities k_i
//! therefore has precision (M/N) Q + sum_i k_i Lambda_i, which is what every
//! replicate solves. Subjects with bitwise-identical information matrices
//! (same design and missingness) are pooled, so the marginal model typically
//! costs O(N D) per replicate.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{surrogate_window, ModelKind, ModelSpec, Panel};
use crate::dlm_core::{self, GaussianBelief, SubjectPosterior, TrajectoryPrior};
use crate::estimators::{self, average_windows, compute_pte, ContrastIndex, EffectLabel, EffectPath, PteResult};
use crate::error::{Error, Result};
use crate::linalg::{self, PackedSym};

/// Per-subject factors of one working model, plus what is needed to turn
/// any multiset of them into a posterior.
#[derive(Debug, Clone)]
pub struct SubjectPosteriorSet {
    pub kind: ModelKind,
    /// Prior share carried by each slot (1/N).
    pub prior_share: f64,
    pub subjects: Vec<SubjectPosterior>,
    pub spec: ModelSpec,
    prior: TrajectoryPrior,
    /// Information-group id per subject.
    group_of: Vec<usize>,
    group_info: Vec<PackedSym>,
    /// Group sizes of the identity multiset.
    group_sizes: Vec<usize>,
    identity_chol: Cholesky<f64, Dyn>,
    /// Conditional model: surrogate windows per subject and time.
    windows: Vec<Vec<Option<Vec<f64>>>>,
    contrast: Option<ContrastIndex>,
    scale: f64,
}

/// Factor every subject of `spec`. Without a frozen evolution the model is
/// fitted first and its realised W_t are frozen.
pub fn decompose(spec: &ModelSpec, panel: &Panel) -> Result<SubjectPosteriorSet> {
    if spec.n_subjects() != panel.n_subjects() || spec.n_times() != panel.n_times() {
        return Err(Error::config("spec and panel disagree on subjects or times"));
    }
    let spec = match &spec.frozen {
        Some(_) => spec.clone(),
        None => spec.with_frozen(dlm_core::fit(spec)?.evolution),
    };
    let prior = TrajectoryPrior::new(&spec)?;
    let n = spec.n_subjects();
    let share = 1.0 / n as f64;
    let factors: Vec<(PackedSym, DVector<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| dlm_core::subject_information(&spec, &prior.trajectory, i))
        .collect::<Result<_>>()?;
    let mut key_to_group: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut group_of = Vec::with_capacity(n);
    let mut group_info: Vec<PackedSym> = Vec::new();
    let mut group_sizes: Vec<usize> = Vec::new();
    for (info, _) in &factors {
        let key: Vec<u64> = info.raw().iter().map(|v| v.to_bits()).collect();
        let g = *key_to_group.entry(key).or_insert_with(|| {
            group_info.push(info.clone());
            group_sizes.push(0);
            group_info.len() - 1
        });
        group_sizes[g] += 1;
        group_of.push(g);
    }
    let subjects: Vec<SubjectPosterior> = factors
        .into_iter()
        .enumerate()
        .map(|(i, (information, score))| SubjectPosterior {
            subject: i,
            arm: spec.arm(i),
            prior_share: share,
            information,
            score,
            shared: Vec::new(),
        })
        .collect();
    let (windows, contrast) = match (&spec.kind, &spec.conditional) {
        (ModelKind::Conditional, Some(cfg)) => (
            (0..n).map(|i| (0..spec.n_times()).map(|t| surrogate_window(panel, cfg, i, t)).collect()).collect(),
            Some(ContrastIndex::from_layout(&spec.layout, cfg)?),
        ),
        _ => (Vec::new(), None),
    };
    let mut set = SubjectPosteriorSet {
        kind: spec.kind,
        prior_share: share,
        subjects,
        scale: spec.outcome_sd,
        prior,
        group_of,
        group_info,
        group_sizes: group_sizes.clone(),
        identity_chol: Cholesky::new(DMatrix::identity(1, 1)).unwrap(),
        windows,
        contrast,
        spec,
    };
    let counts: Vec<f64> = group_sizes.iter().map(|&c| c as f64).collect();
    set.identity_chol = set.factor(&counts, n)?;
    Ok(set)
}

impl SubjectPosteriorSet {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_info.len()
    }

    pub fn n_times(&self) -> usize {
        self.spec.n_times()
    }

    pub fn trajectory_prior(&self) -> &TrajectoryPrior {
        &self.prior
    }

    /// p_i: shared-block beliefs per t under prior share 1/N.
    pub fn subject_beliefs(&self, i: usize) -> Result<Vec<GaussianBelief>> {
        let s = self.subjects.get(i).ok_or_else(|| Error::data(format!("subject index {i} not in set")))?;
        let prec = &self.prior.precision * s.prior_share + s.information.to_dense();
        self.prior.shared_beliefs(&prec, &s.score)
    }

    fn precision(&self, group_counts: &[f64], slots: usize) -> DMatrix<f64> {
        let mut acc = PackedSym::zeros(self.prior.trajectory.dim());
        for (g, &c) in group_counts.iter().enumerate() {
            if c != 0.0 {
                acc.add_scaled(c, &self.group_info[g]);
            }
        }
        acc.to_dense() + &self.prior.precision * (slots as f64 * self.prior_share)
    }

    fn factor(&self, group_counts: &[f64], slots: usize) -> Result<Cholesky<f64, Dyn>> {
        linalg::cholesky(&self.precision(group_counts, slots), "recombined precision")
    }

    fn tally(&self, indices: &[usize]) -> Result<(Vec<f64>, DVector<f64>)> {
        if indices.is_empty() {
            return Err(Error::config("empty index multiset"));
        }
        let mut counts = vec![0.0; self.n_groups()];
        let mut score = DVector::zeros(self.prior.trajectory.dim());
        for &i in indices {
            let s = self.subjects.get(i).ok_or_else(|| Error::data(format!("subject index {i} not in set")))?;
            counts[self.group_of[i]] += 1.0;
            score += &s.score;
        }
        Ok((counts, score))
    }

    /// Posterior mean of the shared trajectory for a multiset of subjects.
    pub fn recombine_mean(&self, indices: &[usize]) -> Result<DVector<f64>> {
        let (counts, score) = self.tally(indices)?;
        let same = indices.len() == self.n_subjects()
            && counts.iter().zip(&self.group_sizes).all(|(c, &s)| *c == s as f64);
        if same {
            Ok(self.identity_chol.solve(&score))
        } else {
            Ok(self.factor(&counts, indices.len())?.solve(&score))
        }
    }

    /// Shared-block beliefs per t for a multiset of subjects.
    pub fn recombine(&self, indices: &[usize]) -> Result<Vec<GaussianBelief>> {
        let (counts, score) = self.tally(indices)?;
        self.prior.shared_beliefs(&self.precision(&counts, indices.len()), &score)
    }

    /// Shared-block means at t from a trajectory mean.
    pub fn shared_means(&self, traj_mean: &DVector<f64>, t: usize) -> Vec<f64> {
        self.prior.trajectory.coords_at(t).iter().map(|&c| traj_mean[c]).collect()
    }

    /// Effect path implied by a recombined trajectory mean. For the marginal
    /// model this is Delta; for the conditional model Delta_R with the
    /// control average over the control slots of `indices`.
    pub fn effect_path(&self, traj_mean: &DVector<f64>, indices: &[usize]) -> Result<EffectPath> {
        let nt = self.n_times();
        let k = self.spec.layout.index_of("treatment").ok_or_else(|| Error::config("layout has no treatment path"))?;
        match self.kind {
            ModelKind::Marginal => {
                let v = (0..nt).map(|t| traj_mean[self.prior.trajectory.coord(t, k)]).collect();
                EffectPath::new(EffectLabel::Delta, v, self.scale)
            }
            ModelKind::Conditional => {
                let idx = self.contrast.as_ref().ok_or_else(|| Error::config("conditional set without contrast index"))?;
                let controls: Vec<usize> = indices.iter().copied().filter(|&i| self.spec.arm(i) == 0).collect();
                let len = self.spec.conditional.as_ref().map_or(0, |c| c.window_len());
                let ctrl = average_windows(&self.windows, &controls, nt, len)?;
                let v = (0..nt).map(|t| idx.delta_r(&self.shared_means(traj_mean, t), &ctrl.windows[t])).collect();
                let mut p = EffectPath::new(EffectLabel::DeltaR, v, self.scale)?;
                p.imputed = ctrl.imputed;
                Ok(p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    /// Two-sided percentile interval level, e.g. 0.90.
    pub level: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: 2000, level: 0.95, seed: 1, stratified: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub replicates: usize,
    pub seed: u64,
    pub stratified: bool,
    /// Resampled subject slots per replicate.
    pub indices: Vec<Vec<usize>>,
    pub delta: Vec<Vec<f64>>,
    pub delta_r: Vec<Vec<f64>>,
    pub pte: Vec<f64>,
    pub lpte: Vec<Vec<f64>>,
    pub cpte: Vec<Vec<f64>>,
    /// Replicates whose PTE denominator was flagged.
    pub undefined: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n_used: usize,
}

/// Percentile interval and SD of the finite draws.
pub fn percentile_interval(point: f64, draws: &[f64], level: f64) -> IntervalEstimate {
    let mut v: Vec<f64> = draws.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return IntervalEstimate { point, se: f64::NAN, ci_low: f64::NAN, ci_high: f64::NAN, level, n_used: 0 };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let se = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    let a = (1.0 - level) / 2.0;
    IntervalEstimate { point, se, ci_low: quantile(&v, a), ci_high: quantile(&v, 1.0 - a), level, n_used: n }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: PteResult,
    pub draws: BootstrapDraws,
    pub pte: IntervalEstimate,
    pub lpte: Vec<IntervalEstimate>,
    pub cpte: Vec<IntervalEstimate>,
    pub delta: Vec<IntervalEstimate>,
    pub delta_r: Vec<IntervalEstimate>,
    pub n_undefined: usize,
    /// More than half of the replicates had an undefined PTE.
    pub unreliable: bool,
    pub warnings: Vec<String>,
}

/// Subject slots for replicate b: per arm, draw the arm's size with
/// replacement from its members (or from everyone when unstratified).
pub fn draw_indices(arms: &[u8], seed: u64, b: u64, stratified: bool) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(b);
    let n = arms.len();
    if !stratified {
        return (0..n).map(|_| rng.random_range(0..n)).collect();
    }
    let mut out = Vec::with_capacity(n);
    for arm in 0..=1u8 {
        let members: Vec<usize> = (0..n).filter(|&i| arms[i] == arm).collect();
        for _ in 0..members.len() {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    out
}

/// Delta, Delta_R and the PTE summaries of one replicate.
pub fn replicate(
    marginal: &SubjectPosteriorSet,
    conditional: &SubjectPosteriorSet,
    indices: &[usize],
) -> Result<PteResult> {
    let d = marginal.effect_path(&marginal.recombine_mean(indices)?, indices)?;
    let r = conditional.effect_path(&conditional.recombine_mean(indices)?, indices)?;
    compute_pte(&d, &r)
}

/// Paired recombination bootstrap of Delta, Delta_R and the PTE summaries.
/// The point estimates come from `point` (the discount fits).
pub fn bootstrap_pte(
    marginal: &SubjectPosteriorSet,
    conditional: &SubjectPosteriorSet,
    point: &PteResult,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if marginal.kind != ModelKind::Marginal || conditional.kind != ModelKind::Conditional {
        return Err(Error::config("bootstrap needs a marginal and a conditional posterior set"));
    }
    if marginal.spec.arms() != conditional.spec.arms() {
        return Err(Error::config("posterior sets were built from different panels"));
    }
    if config.replicates == 0 {
        return Err(Error::config("replicate count must be positive"));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::config("interval level must lie in (0, 1)"));
    }
    let mut warnings = Vec::new();
    if config.replicates < 100 {
        warnings.push(format!("only {} replicates; at least 100 are recommended", config.replicates));
    }
    let arms = marginal.spec.arms().to_vec();
    let reps: Vec<(Vec<usize>, PteResult)> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|b| {
            let idx = draw_indices(&arms, config.seed, b, config.stratified);
            let r = replicate(marginal, conditional, &idx)?;
            Ok((idx, r))
        })
        .collect::<Result<_>>()?;
    let nt = point.lpte.len();
    let mut draws = BootstrapDraws {
        replicates: config.replicates,
        seed: config.seed,
        stratified: config.stratified,
        indices: Vec::with_capacity(reps.len()),
        delta: Vec::with_capacity(reps.len()),
        delta_r: Vec::with_capacity(reps.len()),
        pte: Vec::with_capacity(reps.len()),
        lpte: Vec::with_capacity(reps.len()),
        cpte: Vec::with_capacity(reps.len()),
        undefined: Vec::new(),
    };
    for (b, (idx, r)) in reps.into_iter().enumerate() {
        if !r.pte_defined() {
            draws.undefined.push(b);
        }
        draws.indices.push(idx);
        draws.delta.push(r.delta.values);
        draws.delta_r.push(r.delta_r.values);
        draws.pte.push(r.pte);
        draws.lpte.push(r.lpte);
        draws.cpte.push(r.cpte);
    }
    let col = |m: &[Vec<f64>], t: usize| m.iter().map(|r| r[t]).collect::<Vec<_>>();
    let per_t = |m: &[Vec<f64>], pts: &[f64]| -> Vec<IntervalEstimate> {
        (0..nt).map(|t| percentile_interval(pts[t], &col(m, t), config.level)).collect()
    };
    let n_undefined = draws.undefined.len();
    if n_undefined > 0 {
        warnings.push(format!("{n_undefined} replicates had an undefined PTE and were excluded"));
    }
    Ok(BootstrapResult {
        pte: percentile_interval(point.pte, &draws.pte, config.level),
        lpte: per_t(&draws.lpte, &point.lpte),
        cpte: per_t(&draws.cpte, &point.cpte),
        delta: per_t(&draws.delta, &point.delta.values),
        delta_r: per_t(&draws.delta_r, &point.delta_r.values),
        unreliable: 2 * n_undefined > config.replicates,
        n_undefined,
        point: point.clone(),
        draws,
        warnings,
    })
}

/// Point estimates, both decompositions and the bootstrap in one call.
pub fn bootstrap_panel(
    panel: &Panel,
    config: &estimators::PteConfig,
    boot: &BootstrapConfig,
) -> Result<(estimators::PteAnalysis, BootstrapResult)> {
    let analysis = estimators::analyze(panel, config)?;
    let ms = crate::design::build_marginal(panel, &config.conditional.covariates, &config.options)?
        .with_frozen(analysis.marginal.evolution.clone());
    let cs = crate::design::build_conditional(panel, &config.conditional, &config.options)?
        .with_frozen(analysis.conditional.evolution.clone());
    let mset = decompose(&ms, panel)?;
    let cset = decompose(&cs, panel)?;
    let res = bootstrap_pte(&mset, &cset, &analysis.result, boot)?;
    Ok((analysis, res))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityDecision {
    pub reject: bool,
    pub ci_low: f64,
    pub threshold: f64,
    pub alpha: f64,
}

/// One-sided test of H0: PTE <= threshold at level alpha, from a two-sided
/// interval of level 1 - 2 alpha. Rejects iff the lower bound exceeds the
/// threshold.
pub fn validity_test(interval: &IntervalEstimate, threshold: f64, alpha: f64) -> Result<ValidityDecision> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::config("alpha must lie in (0, 0.5)"));
    }
    if (interval.level - (1.0 - 2.0 * alpha)).abs() > 1e-9 {
        return Err(Error::config(format!(
            "interval level {} does not match 1 - 2*alpha = {}",
            interval.level,
            1.0 - 2.0 * alpha
        )));
    }
    Ok(ValidityDecision { reject: interval.ci_low > threshold, ci_low: interval.ci_low, threshold, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(lo: f64, level: f64) -> IntervalEstimate {
        IntervalEstimate { point: 0.9, se: 0.1, ci_low: lo, ci_high: 1.2, level, n_used: 100 }
    }

    #[test]
    fn validity_examples() {
        assert!(validity_test(&iv(0.80, 0.90), 0.75, 0.05).unwrap().reject);
        assert!(!validity_test(&iv(0.611, 0.90), 0.75, 0.05).unwrap().reject);
        assert!(!validity_test(&iv(0.75, 0.90), 0.75, 0.05).unwrap().reject);
        assert!(validity_test(&iv(0.80, 0.95), 0.75, 0.05).is_err());
    }

    #[test]
    fn stratified_draws_keep_arm_counts() {
        let arms = [0, 1, 1, 0, 1, 0, 0];
        for b in 0..20 {
            let idx = draw_indices(&arms, 9, b, true);
            assert_eq!(idx.len(), arms.len());
            let ones = idx.iter().filter(|&&i| arms[i] == 1).count();
            assert_eq!(ones, 3);
        }
        assert_eq!(draw_indices(&arms, 9, 3, true), draw_indices(&arms, 9, 3, true));
        assert_ne!(draw_indices(&arms, 9, 3, true), draw_indices(&arms, 9, 4, true));
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.125), 1.5);
        let i = percentile_interval(3.0, &[3.0; 10], 0.9);
        assert_eq!((i.se, i.ci_low, i.ci_high), (0.0, 3.0, 3.0));
    }
}
