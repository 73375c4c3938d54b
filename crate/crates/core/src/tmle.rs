//! Targeting of the counterfactual survival curve, its efficient influence
//! function, and variance estimation under simple and stratified
//! randomization.
//!
//! For a target time `t*` and arm `a`, the initial hazards are fluctuated
//! along `logit h + eps * H_t` with clever covariate
//!
//! ```text
//! H_t(a, X) = -1 / (p_A(a, X) * Pi_C(t, a)) * S(t*, a, X) / S(t, a, X)
//! ```
//!
//! where `S(t, a, X) = prod_{k <= t} (1 - h(k, a, X))` and
//! `Pi_C(t, a) = prod_{k < t} (1 - p_C(k, a))` (events precede censoring
//! within a period).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FoldAssignment, TrialDataset};
use crate::error::{Error, Result};
use crate::nuisance::{fit_cell_hazard, CensoringModel, HazardTable, ModelSummary, NuisanceBundle, PropensityModel};
use crate::stats::{expit, logit};

/// Newton stops once the summed score is below this per person-time row.
const FLUCT_TOL: f64 = 1e-13;
const FLUCT_MAX_ITER: usize = 50;
const EPS_BRACKET: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TmleConfig {
    /// Repeat the fluctuation until the freshly recomputed score vanishes;
    /// `false` runs a single pass.
    pub iterate: bool,
    pub max_rounds: usize,
    /// Stopping tolerance on `|E_n[H (L - h)]|` with `H` recomputed from
    /// the current hazards.
    pub score_tol: f64,
    /// Floor applied to `Pi_C` in the clever covariate.
    pub censoring_floor: f64,
    /// Floor applied to `S(t, a, X)` in the denominator of the survival ratio.
    pub survival_floor: f64,
}

impl Default for TmleConfig {
    fn default() -> Self {
        Self { iterate: true, max_rounds: 50, score_tol: 1e-10, censoring_floor: 0.05, survival_floor: 1e-10 }
    }
}

/// Clever covariate `H_t` for one subject.
///
/// `hazards[k]` is `h(k + 1, a, X)`; `in_arm` is `1{A = a}`.
pub fn clever_covariate(t: u32, t_star: u32, in_arm: bool, p_arm: f64, pi_c: f64, hazards: &[f64]) -> f64 {
    if !in_arm {
        return 0.0;
    }
    let s = |m: u32| hazards[..m as usize].iter().map(|h| 1.0 - h).product::<f64>();
    -s(t_star) / s(t) / (p_arm * pi_c)
}

fn log_lik(offsets: &[f64], h: &[f64], y: &[f64], eps: f64) -> f64 {
    offsets
        .iter()
        .zip(h)
        .zip(y)
        .map(|((&o, &hh), &yy)| {
            let e = o + eps * hh;
            let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yy * e - log1pexp
        })
        .sum()
}

fn score_info(offsets: &[f64], h: &[f64], y: &[f64], eps: f64) -> (f64, f64) {
    let mut s = 0.0;
    let mut info = 0.0;
    for ((&o, &hh), &yy) in offsets.iter().zip(h).zip(y) {
        let q = expit(o + eps * hh);
        s += hh * (yy - q);
        info += hh * hh * q * (1.0 - q);
    }
    (s, info)
}

/// Maximizes the one-parameter logistic likelihood with fixed `offsets` and
/// covariate `h` over `eps`.
///
/// Newton iterations stop once `|score| / rows < 1e-10`; if they fail, a
/// golden-section search on `[-10, 10]` is tried.
pub fn fluctuate(offsets: &[f64], h: &[f64], y: &[f64]) -> Result<f64> {
    let m = offsets.len();
    if m == 0 || h.iter().all(|&v| v == 0.0) {
        return Err(Error::Estimation("clever covariate is identically zero; no information to fluctuate".into()));
    }
    let tol = FLUCT_TOL * m as f64;
    let mut eps = 0.0;
    let mut ll = log_lik(offsets, h, y, eps);
    for _ in 0..FLUCT_MAX_ITER {
        let (s, info) = score_info(offsets, h, y, eps);
        if s.abs() < tol {
            return Ok(eps);
        }
        if info <= 0.0 || !info.is_finite() {
            break;
        }
        let step = s / info;
        if step.abs() < 1e-15 * (1.0 + eps.abs()) {
            return Ok(eps);
        }
        let mut scale = 1.0;
        loop {
            let cand = eps + scale * step;
            let cand_ll = log_lik(offsets, h, y, cand);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                eps = cand;
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
            if scale < 1e-12 {
                break;
            }
        }
        if scale < 1e-12 {
            break;
        }
    }
    let (s, _) = score_info(offsets, h, y, eps);
    if s.abs() < tol {
        return Ok(eps);
    }
    log::debug!("Newton fluctuation stalled at eps = {eps}, score = {s:e}; trying golden section");
    golden_section(offsets, h, y)
}

fn golden_section(offsets: &[f64], h: &[f64], y: &[f64]) -> Result<f64> {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-EPS_BRACKET, EPS_BRACKET);
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = log_lik(offsets, h, y, c);
    let mut fd = log_lik(offsets, h, y, d);
    while hi - lo > 1e-13 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = log_lik(offsets, h, y, c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = log_lik(offsets, h, y, d);
        }
    }
    let eps = 0.5 * (lo + hi);
    if eps.abs() >= EPS_BRACKET - 1e-6 {
        return Err(Error::Estimation(format!("fluctuation parameter hit the bracket at {eps}")));
    }
    let (s, _) = score_info(offsets, h, y, eps);
    if !s.is_finite() || s.abs() > 1e-6 * offsets.len() as f64 {
        return Err(Error::Estimation(format!("fluctuation failed to solve the score (|score| = {:e})", s.abs())));
    }
    Ok(eps)
}

/// Result of targeting one `(t*, a)` pair.
#[derive(Debug, Clone, Serialize)]
pub struct TargetFit {
    pub t_star: u32,
    pub arm: u8,
    /// `S_hat(t*, a)`.
    pub estimate: f64,
    /// Fluctuation parameter of each round.
    pub epsilons: Vec<f64>,
    pub converged: bool,
    /// `E_n[H (L - h)]` at the final hazards.
    pub score: f64,
    #[serde(skip)]
    pub eif: Vec<f64>,
    #[serde(skip)]
    pub correction: Vec<f64>,
    /// `S_hat(t*, a, X_i)`.
    #[serde(skip)]
    pub conditional_survival: Vec<f64>,
    /// Targeted hazards, `t_star` values per subject.
    #[serde(skip)]
    pub hazards: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    /// Clever-covariate evaluations where `Pi_C` hit its floor.
    pub censoring_clamps: usize,
    /// Evaluations where `S(t, a, X)` hit its floor.
    pub survival_clamps: usize,
    /// Targets that stopped at `max_rounds` without meeting `score_tol`.
    pub unconverged: usize,
    pub max_abs_score: f64,
    pub max_abs_eif_mean: f64,
    pub models: Vec<ModelSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetedFit {
    pub targets: Vec<TargetFit>,
    pub n: usize,
    /// Randomization probability used in the stratified correction.
    pub p_correction: f64,
    #[serde(skip)]
    pub arms: Vec<u8>,
    #[serde(skip)]
    pub strata: Vec<usize>,
    pub n_strata: usize,
    pub diagnostics: Diagnostics,
}

impl TargetedFit {
    pub fn get(&self, t_star: u32, arm: u8) -> Option<&TargetFit> {
        self.targets.iter().find(|f| f.t_star == t_star && f.arm == arm)
    }

    /// `S_hat(t, a)`, with `S_hat(0, a) = 1`.
    pub fn survival(&self, t: u32, arm: u8) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.get(t, arm)
            .map(|f| f.estimate)
            .ok_or_else(|| Error::Argument(format!("time {t}, arm {arm} was not targeted")))
    }

    /// `phi_i(t, a)`; the zero vector for `t = 0`.
    pub fn eif(&self, t: u32, arm: u8) -> Result<&[f64]> {
        self.get(t, arm)
            .map(|f| f.eif.as_slice())
            .ok_or_else(|| Error::Argument(format!("time {t}, arm {arm} was not targeted")))
    }

    /// Mean of `D` over arm-`arm` subjects within each stratum.
    fn stratum_means(&self, d: &[f64], arm: u8) -> Vec<f64> {
        let mut sum = vec![0.0; self.n_strata];
        let mut cnt = vec![0usize; self.n_strata];
        for i in 0..self.n {
            if self.arms[i] == arm {
                sum[self.strata[i]] += d[i];
                cnt[self.strata[i]] += 1;
            }
        }
        sum.iter().zip(&cnt).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    }
}

/// Per-observation asymptotic variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariancePair {
    pub v_simple: f64,
    pub v_stratified: f64,
    pub correction: f64,
    /// True when `v_simple - correction` was negative and got floored.
    pub floored: bool,
}

/// Influence values and variances of the linear combination
/// `sum_k c_k * S(t_k, a_k)`.
///
/// The simple-randomization variance is `E_n[IF^2]`. Under stratified
/// randomization the component of the influence function explained by
/// `(A - p) g(W)` is balanced away, where
/// `g(w) = sum_k c_k s_k E_n[D(t_k, a_k) | W = w, A = a_k]` with
/// `s_k = 1/p` for arm 1 and `-1/(1-p)` for arm 0; the correction is
/// `p (1 - p) V_n[g(W)]`, the variance taken across strata with weights
/// `n(w)/n`. For a single survival probability this is
/// `((1 - p_a)/p_a) V_n[E_n[D | W]]`.
pub fn variance_pair(fit: &TargetedFit, terms: &[(u32, u8, f64)]) -> Result<(Vec<f64>, VariancePair)> {
    let n = fit.n;
    let mut ifv = vec![0.0; n];
    let mut g = vec![0.0; fit.n_strata];
    let p = fit.p_correction;
    for &(t, a, c) in terms {
        if t == 0 || c == 0.0 {
            continue;
        }
        let tf = fit.get(t, a).ok_or_else(|| Error::Argument(format!("time {t}, arm {a} was not targeted")))?;
        for (v, e) in ifv.iter_mut().zip(&tf.eif) {
            *v += c * e;
        }
        let s = if a == 1 { 1.0 / p } else { -1.0 / (1.0 - p) };
        for (gw, m) in g.iter_mut().zip(fit.stratum_means(&tf.correction, a)) {
            *gw += c * s * m;
        }
    }
    let v_simple = ifv.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut count = vec![0usize; fit.n_strata];
    for &w in &fit.strata {
        count[w] += 1;
    }
    let weight: Vec<f64> = count.iter().map(|&c| c as f64 / n as f64).collect();
    let gbar: f64 = g.iter().zip(&weight).map(|(g, w)| g * w).sum();
    let between: f64 = g.iter().zip(&weight).map(|(g, w)| w * (g - gbar).powi(2)).sum();
    let correction = p * (1.0 - p) * between;
    let mut v_stratified = v_simple - correction;
    let floor = 1e-12f64.min(v_simple);
    let floored = v_stratified < floor;
    if floored {
        log::warn!("stratified variance {v_stratified:e} floored at {floor:e}");
        v_stratified = floor;
    }
    Ok((ifv, VariancePair { v_simple, v_stratified, correction, floored }))
}

struct TargetInputs<'a> {
    ds: &'a TrialDataset,
    hazard: &'a HazardTable,
    censoring: &'a CensoringModel,
    propensity: &'a PropensityModel,
    cfg: &'a TmleConfig,
}

struct Clamps {
    censoring: usize,
    survival: usize,
}

impl TargetInputs<'_> {
    /// Base clever covariate (without `1/p_A`) for all subjects and
    /// `t = 1..=t_star`, from current hazards `h` (row-major, `t_star` per
    /// subject). Also returns `S(t_star, a, X_i)`.
    fn base_covariate(&self, h: &[f64], t_star: usize, pi_c: &[f64], clamps: &mut Clamps) -> (Vec<f64>, Vec<f64>) {
        let n = self.ds.n();
        let mut out = vec![0.0; n * t_star];
        let mut s_end = vec![0.0; n];
        let mut surv = vec![0.0; t_star];
        for i in 0..n {
            let hi = &h[i * t_star..(i + 1) * t_star];
            let mut s = 1.0;
            for k in 0..t_star {
                s *= 1.0 - hi[k];
                surv[k] = s;
            }
            s_end[i] = s;
            for k in 0..t_star {
                let denom = if surv[k] < self.cfg.survival_floor {
                    clamps.survival += 1;
                    self.cfg.survival_floor
                } else {
                    surv[k]
                };
                out[i * t_star + k] = -(s / denom) / pi_c[k];
            }
        }
        (out, s_end)
    }

    /// Residual sum `D_i = sum_{t <= min(U_i, t*)} Hbase_t (L_t - h_t)`.
    fn residual_sums(&self, h: &[f64], base: &[f64], t_star: usize) -> Vec<f64> {
        self.ds
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let last = (s.u as usize).min(t_star);
                (0..last)
                    .map(|k| {
                        let l = (k + 1 == s.u as usize && s.delta == 1) as u8 as f64;
                        base[i * t_star + k] * (l - h[i * t_star + k])
                    })
                    .sum()
            })
            .collect()
    }

    fn target(&self, t_star: u32, arm: u8) -> Result<(TargetFit, Clamps)> {
        let ds = self.ds;
        let n = ds.n();
        let ts = t_star as usize;
        let mut clamps = Clamps { censoring: 0, survival: 0 };
        let pi_c: Vec<f64> = (1..=t_star)
            .map(|t| {
                let v = self.censoring.survivor(t, arm);
                if v < self.cfg.censoring_floor {
                    clamps.censoring += 1;
                    self.cfg.censoring_floor
                } else {
                    v
                }
            })
            .collect();
        let p_arm: Vec<f64> = (0..n).map(|i| self.propensity.prob(i, arm)).collect();
        let mut h: Vec<f64> = Vec::with_capacity(n * ts);
        for i in 0..n {
            h.extend_from_slice(&self.hazard.curve(i, arm)[..ts]);
        }
        let score_of = |h: &[f64], base: &[f64]| -> f64 {
            let d = self.residual_sums(h, base, ts);
            (0..n).filter(|&i| ds.subjects[i].a == arm).map(|i| d[i] / p_arm[i]).sum::<f64>() / n as f64
        };

        if !ds.subjects.iter().any(|s| s.a == arm) {
            return Err(Error::Estimation(format!("no subjects in arm {arm}; clever covariate is identically zero")));
        }
        let mut epsilons = Vec::new();
        let mut converged = false;
        for round in 0..self.cfg.max_rounds.max(1) {
            let (base, _) = self.base_covariate(&h, ts, &pi_c, &mut clamps);
            if round > 0 {
                let s = score_of(&h, &base);
                if s.abs() < self.cfg.score_tol {
                    converged = true;
                    break;
                }
                if !self.cfg.iterate {
                    break;
                }
            }
            let mut offsets = Vec::new();
            let mut cov = Vec::new();
            let mut y = Vec::new();
            for (i, s) in ds.subjects.iter().enumerate() {
                if s.a != arm {
                    continue;
                }
                for k in 0..(s.u as usize).min(ts) {
                    let hk = h[i * ts + k];
                    if hk <= 0.0 || hk >= 1.0 {
                        continue;
                    }
                    offsets.push(logit(hk));
                    cov.push(base[i * ts + k] / p_arm[i]);
                    y.push((k + 1 == s.u as usize && s.delta == 1) as u8 as f64);
                }
            }
            if offsets.is_empty() || cov.iter().all(|&c| c == 0.0) {
                // degenerate hazards or S(t*) = 0: the score is zero already
                converged = true;
                break;
            }
            let eps = fluctuate(&offsets, &cov, &y)?;
            epsilons.push(eps);
            if eps != 0.0 {
                for i in 0..n {
                    for k in 0..ts {
                        let hk = h[i * ts + k];
                        if hk > 0.0 && hk < 1.0 {
                            h[i * ts + k] = expit(logit(hk) + eps * base[i * ts + k] / p_arm[i]);
                        }
                    }
                }
            }
        }

        let (base, s_end) = self.base_covariate(&h, ts, &pi_c, &mut clamps);
        let correction = self.residual_sums(&h, &base, ts);
        let estimate = s_end.iter().sum::<f64>() / n as f64;
        let eif: Vec<f64> = (0..n)
            .map(|i| {
                let weighted = if ds.subjects[i].a == arm { correction[i] / p_arm[i] } else { 0.0 };
                weighted + s_end[i] - estimate
            })
            .collect();
        let score = (0..n).filter(|&i| ds.subjects[i].a == arm).map(|i| correction[i] / p_arm[i]).sum::<f64>() / n as f64;
        if !converged && self.cfg.iterate {
            converged = score.abs() < self.cfg.score_tol;
        }
        Ok((
            TargetFit {
                t_star,
                arm,
                estimate,
                epsilons,
                converged,
                score,
                eif,
                correction,
                conditional_survival: s_end,
                hazards: h,
            },
            clamps,
        ))
    }
}

/// Targets `S(t*, a)` for every `t*` in `target_times` and both arms.
///
/// `design_p`, when given, is the randomization probability used in the
/// stratified variance correction; otherwise the pooled treated fraction.
pub fn tmle_survival_curve(
    ds: &TrialDataset,
    nuisances: &NuisanceBundle,
    target_times: &[u32],
    cfg: &TmleConfig,
    design_p: Option<f64>,
) -> Result<TargetedFit> {
    let mut times: Vec<u32> = target_times.to_vec();
    times.sort_unstable();
    times.dedup();
    if let Some(&t) = times.iter().find(|&&t| t < 1 || t > ds.horizon) {
        return Err(Error::Argument(format!("target time {t} outside 1..={}", ds.horizon)));
    }
    let inputs = TargetInputs {
        ds,
        hazard: &nuisances.hazard,
        censoring: &nuisances.censoring,
        propensity: &nuisances.propensity,
        cfg,
    };
    let jobs: Vec<(u32, u8)> = times.iter().flat_map(|&t| [(t, 0u8), (t, 1u8)]).collect();
    let results: Vec<Result<(TargetFit, Clamps)>> = jobs.par_iter().map(|&(t, a)| inputs.target(t, a)).collect();
    let mut diagnostics = Diagnostics { models: nuisances.models.clone(), ..Default::default() };
    let mut targets = Vec::with_capacity(jobs.len());
    for r in results {
        let (tf, c) = r?;
        diagnostics.censoring_clamps += c.censoring;
        diagnostics.survival_clamps += c.survival;
        diagnostics.unconverged += (!tf.converged) as usize;
        diagnostics.max_abs_score = diagnostics.max_abs_score.max(tf.score.abs());
        let m = tf.eif.iter().sum::<f64>() / ds.n() as f64;
        diagnostics.max_abs_eif_mean = diagnostics.max_abs_eif_mean.max(m.abs());
        targets.push(tf);
    }
    if diagnostics.unconverged > 0 {
        log::warn!("{} targeting problems stopped before the score tolerance", diagnostics.unconverged);
    }
    Ok(TargetedFit {
        targets,
        n: ds.n(),
        p_correction: design_p.unwrap_or_else(|| ds.treated_fraction()),
        arms: ds.subjects.iter().map(|s| s.a).collect(),
        strata: ds.subjects.iter().map(|s| s.stratum).collect(),
        n_strata: ds.n_strata(),
        diagnostics,
    })
}

/// The unadjusted estimator: empirical (time, arm) hazards, censoring
/// NPMLE and a constant propensity (the design value, else the pooled
/// treated fraction). Targeting leaves the hazards unchanged, so the curve
/// is the per-arm product-limit estimate.
pub fn km_baseline(ds: &TrialDataset, target_times: &[u32], cfg: &TmleConfig, design_p: Option<f64>) -> Result<TargetedFit> {
    let rows = crate::data::expand_long(ds);
    let model = fit_cell_hazard(&rows, ds.horizon);
    let hazard = HazardTable::from_fn(ds.n(), ds.horizon, |i, a, t| model.predict(&ds.subjects[i], t, a));
    let p = design_p.unwrap_or_else(|| ds.treated_fraction());
    let propensity = PropensityModel { treated: vec![p; ds.n()], coef: Vec::new(), design: Some(p), bound: 0.0 };
    let bundle = NuisanceBundle {
        hazard,
        censoring: CensoringModel::fit(&rows, ds.horizon),
        propensity,
        folds: FoldAssignment { n_folds: 1, fold_of: vec![0; ds.n()], seed: 0 },
        models: vec![ModelSummary { kind: "intercept-only".into(), ..Default::default() }],
    };
    tmle_survival_curve(ds, &bundle, target_times, cfg, design_p)
}
