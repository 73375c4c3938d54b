//! Simulated stratified trials with discrete-time survival outcomes, and a
//! Monte Carlo harness comparing estimators on them.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, Method};
use crate::data::{SubjectRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::estimands::{EstimandKind, EstimandSpec};
use crate::nuisance::{FeatureSpec, HazardLearner, NuisanceSpec, TimeEncoding};
use crate::rng::{derive_seed, rng_for};
use crate::stats::expit;
use crate::tmle::TmleConfig;

pub const N_COVARIATES: usize = 30;
pub const N_STRATA: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Randomization {
    /// Within each stratum, exactly half the subjects are treated (the odd
    /// one out by a coin flip).
    #[default]
    StratifiedBalanced,
    SimpleBernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgmConfig {
    pub n: usize,
    pub t_max: u32,
    pub seed: u64,
    pub randomization: Randomization,
    pub p: f64,
    /// Multiplies every treatment coefficient of the event hazard; 0 gives
    /// the null.
    pub treatment_scale: f64,
}

impl Default for DgmConfig {
    fn default() -> Self {
        Self { n: 1000, t_max: 4, seed: 1, randomization: Randomization::default(), p: 0.5, treatment_scale: 1.0 }
    }
}

impl DgmConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Argument(format!("n must be at least 4, got {}", self.n)));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Argument(format!("p must lie in (0, 1), got {}", self.p)));
        }
        if self.t_max == 0 {
            return Err(Error::Argument("t_max must be at least 1".into()));
        }
        Ok(())
    }

    /// Logit of the event hazard in period `t` for stratum `s` (1-based).
    pub fn event_logit(&self, t: u32, a: u8, s: usize, w1: f64, w3: f64, w5: f64) -> f64 {
        let t = t as f64;
        let a = a as f64;
        let (s2, s3, s4) = ((s == 2) as u8 as f64, (s == 3) as u8 as f64, (s == 4) as u8 as f64);
        let treat = -0.2 * a - 0.0005 * t * a - 0.025 * a * s3 - 0.070 * a * s4 - 0.009 * t * a * s4;
        (-3.1 + 0.55 * t) / 5.0 + 1.5 * s2 - 1.5 * s3 + 1.5 * s4 + 0.03 * t * s3 + 0.03 * t * s4
            + self.treatment_scale * treat
            + 3.0 * (w1 + w3 + w5)
    }
}

/// Logit of the censoring hazard in period `t`.
pub fn censoring_logit(t: u32) -> f64 {
    -5.0 + 0.1 * t as f64
}

fn draw_stratum(rng: &mut impl Rng) -> usize {
    // P(S = s) = s / 10
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for s in 1..=N_STRATA {
        acc += s as f64 / 10.0;
        if u < acc {
            return s;
        }
    }
    N_STRATA
}

fn draw_covariates(rng: &mut impl Rng) -> Vec<f64> {
    let unif = Uniform::new_inclusive(-1.0, 1.0);
    (1..=N_COVARIATES)
        .map(|j| {
            let (mean, sd) = match j {
                1 => (0.125, 1.0),
                3 => (-0.125, 1.0),
                5 => (0.05, 1.0),
                7 | 9 | 15 => (0.0, 1.0),
                11 | 13 => (0.0, 0.25),
                _ => return unif.sample(rng),
            };
            Normal::new(mean, sd).expect("valid normal").sample(rng)
        })
        .collect()
}

/// Draws one trial.
pub fn generate_trial(cfg: &DgmConfig) -> Result<TrialDataset> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, &[0x7121]);
    let strata: Vec<usize> = (0..cfg.n).map(|_| draw_stratum(&mut rng)).collect();
    let xs: Vec<Vec<f64>> = (0..cfg.n).map(|_| draw_covariates(&mut rng)).collect();
    let arms = assign_treatment(&strata, cfg, &mut rng);
    let mut subjects = Vec::with_capacity(cfg.n);
    for (i, (x, (&s, &a))) in xs.into_iter().zip(strata.iter().zip(&arms)).enumerate() {
        let mut u = cfg.t_max;
        let mut delta = 0;
        for t in 1..=cfg.t_max {
            let event = rng.gen::<f64>() < expit(cfg.event_logit(t, a, s, x[0], x[2], x[4]));
            let censor = rng.gen::<f64>() < expit(censoring_logit(t));
            if event {
                u = t;
                delta = 1;
                break;
            }
            if censor {
                u = t;
                break;
            }
        }
        subjects.push(SubjectRecord { id: (i + 1).to_string(), x, stratum: s - 1, a, u, delta });
    }
    TrialDataset::new(
        subjects,
        cfg.t_max,
        (1..=N_COVARIATES).map(|j| format!("W{j}")).collect(),
        (1..=N_STRATA).map(|s| s.to_string()).collect(),
    )
}

fn assign_treatment(strata: &[usize], cfg: &DgmConfig, rng: &mut impl Rng) -> Vec<u8> {
    let mut arms = vec![0u8; strata.len()];
    match cfg.randomization {
        Randomization::SimpleBernoulli => {
            for a in arms.iter_mut() {
                *a = (rng.gen::<f64>() < cfg.p) as u8;
            }
        }
        Randomization::StratifiedBalanced => {
            for s in 1..=N_STRATA {
                let members: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == s).collect();
                let exact = members.len() as f64 * cfg.p;
                let mut n1 = exact.floor() as usize;
                if rng.gen::<f64>() < exact - exact.floor() {
                    n1 += 1;
                }
                let mut labels: Vec<u8> = (0..members.len()).map(|k| (k < n1) as u8).collect();
                labels.shuffle(rng);
                for (&i, l) in members.iter().zip(labels) {
                    arms[i] = l;
                }
            }
        }
    }
    arms
}

/// Monte Carlo estimate of the potential-outcome survival curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrueCurves {
    /// `survival[a][t - 1] = S(t, a)`.
    pub survival: [Vec<f64>; 2],
    pub draws: usize,
    /// Simulation standard error of `S(t, 1) - S(t, 0)`, by `t`.
    pub diff_se: Vec<f64>,
}

impl TrueCurves {
    pub fn value(&self, t: u32, a: u8) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.survival[a as usize][t as usize - 1]
        }
    }

    /// Value of an estimand at the true curves.
    pub fn estimand(&self, spec: &EstimandSpec) -> Result<f64> {
        Ok(spec.value_and_gradient(|t, a| self.value(t, a))?.0)
    }
}

const TRUTH_CHUNK: usize = 100_000;

/// Integrates the conditional survival `prod_{k<=t}(1 - h(k, a, X))` over
/// the covariate distribution by Monte Carlo. Censoring plays no role, and
/// only the covariates entering the hazard are drawn.
pub fn true_curves(cfg: &DgmConfig, draws: usize, seed: u64) -> Result<TrueCurves> {
    if draws == 0 {
        return Err(Error::Argument("need at least one oracle draw".into()));
    }
    let t_max = cfg.t_max as usize;
    let n_chunks = draws.div_ceil(TRUTH_CHUNK);
    // per chunk: sums of S(t, a) and of the squared arm difference
    let partial: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(seed, &[0x7207, k as u64]);
            let m = TRUTH_CHUNK.min(draws - k * TRUTH_CHUNK);
            let mut sum = vec![0.0; 2 * t_max];
            let mut diff = vec![0.0; t_max];
            let mut diff2 = vec![0.0; t_max];
            let n1 = Normal::new(0.125, 1.0).unwrap();
            let n3 = Normal::new(-0.125, 1.0).unwrap();
            let n5 = Normal::new(0.05, 1.0).unwrap();
            for _ in 0..m {
                let s = draw_stratum(&mut rng);
                let (w1, w3, w5) = (n1.sample(&mut rng), n3.sample(&mut rng), n5.sample(&mut rng));
                let mut surv = [1.0f64; 2];
                for t in 1..=cfg.t_max {
                    for a in 0..2u8 {
                        surv[a as usize] *= 1.0 - expit(cfg.event_logit(t, a, s, w1, w3, w5));
                        sum[a as usize * t_max + t as usize - 1] += surv[a as usize];
                    }
                    let d = surv[1] - surv[0];
                    diff[t as usize - 1] += d;
                    diff2[t as usize - 1] += d * d;
                }
            }
            (sum, diff, diff2)
        })
        .collect();
    let mut sum = vec![0.0; 2 * t_max];
    let mut diff = vec![0.0; t_max];
    let mut diff2 = vec![0.0; t_max];
    for (s, d, d2) in partial {
        sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        diff.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        diff2.iter_mut().zip(d2).for_each(|(a, b)| *a += b);
    }
    let m = draws as f64;
    let survival = [0, 1].map(|a| sum[a * t_max..(a + 1) * t_max].iter().map(|v| v / m).collect());
    let diff_se = diff
        .iter()
        .zip(&diff2)
        .map(|(d, d2)| {
            let mean = d / m;
            ((d2 / m - mean * mean).max(0.0) / (m - 1.0).max(1.0)).sqrt()
        })
        .collect();
    Ok(TrueCurves { survival, draws, diff_se })
}

/// `S(t, 1) - S(t, 0)` with its simulation standard error.
pub fn true_theta(cfg: &DgmConfig, t: u32, draws: usize, seed: u64) -> Result<(f64, f64)> {
    if t == 0 || t > cfg.t_max {
        return Err(Error::Argument(format!("time {t} outside 1..={}", cfg.t_max)));
    }
    let c = true_curves(cfg, draws, seed)?;
    Ok((c.value(t, 1) - c.value(t, 0), c.diff_se[t as usize - 1]))
}

/// Covariate sets used in the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariatePreset {
    /// The variables and interactions of the true hazard.
    Correct,
    /// All 30 covariates plus strata, time and arm main effects.
    All,
    /// Even-indexed covariates with time and arm, no strata.
    Incorrect,
}

impl CovariatePreset {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Correct => "correct",
            Self::All => "all",
            Self::Incorrect => "incorrect",
        }
    }

    pub fn features(&self) -> FeatureSpec {
        let inter = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match self {
            Self::Correct => FeatureSpec {
                time: TimeEncoding::Both,
                arm: true,
                strata: true,
                covariates: Some(vec!["W1".into(), "W3".into(), "W5".into()]),
                interactions: vec![
                    inter(&["t", "a"]),
                    inter(&["t", "stratum=3"]),
                    inter(&["t", "stratum=4"]),
                    inter(&["a", "stratum=3"]),
                    inter(&["a", "stratum=4"]),
                    inter(&["t", "a", "stratum=4"]),
                ],
            },
            Self::All => FeatureSpec { time: TimeEncoding::Both, arm: true, strata: true, covariates: None, interactions: vec![] },
            Self::Incorrect => FeatureSpec {
                time: TimeEncoding::Both,
                arm: true,
                strata: false,
                covariates: Some((1..=N_COVARIATES / 2).map(|j| format!("W{}", 2 * j)).collect()),
                interactions: vec![],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub label: String,
    pub method: Method,
    #[serde(default)]
    pub learner: HazardLearner,
    /// Feature preset; ignored for KM.
    #[serde(default)]
    pub preset: Option<CovariatePreset>,
    /// Explicit features, used when no preset is given.
    #[serde(default)]
    pub features: Option<FeatureSpec>,
    #[serde(default = "one")]
    pub folds: usize,
    /// Restricts the estimator to these sample sizes; `None` means all.
    #[serde(default)]
    pub sample_sizes: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}

impl EstimatorConfig {
    pub fn km() -> Self {
        Self {
            label: "KM".into(),
            method: Method::Km,
            learner: HazardLearner::InterceptOnly,
            preset: None,
            features: None,
            folds: 1,
            sample_sizes: None,
        }
    }

    pub fn tmle(label: &str, learner: HazardLearner, preset: CovariatePreset) -> Self {
        Self {
            label: label.into(),
            method: Method::Tmle,
            learner,
            preset: Some(preset),
            features: None,
            folds: 1,
            sample_sizes: None,
        }
    }

    fn nuisance(&self, seed: u64) -> NuisanceSpec {
        let features = match (&self.preset, &self.features) {
            (Some(p), _) => p.features(),
            (None, Some(f)) => f.clone(),
            (None, None) => FeatureSpec::default(),
        };
        NuisanceSpec { learner: self.learner.clone(), features, folds: self.folds, seed, ..NuisanceSpec::default() }
    }

    fn runs_at(&self, n: usize) -> bool {
        self.sample_sizes.as_ref().map_or(true, |s| s.contains(&n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub sample_sizes: Vec<usize>,
    pub n_reps: usize,
    pub master_seed: u64,
    pub t_max: u32,
    pub randomization: Randomization,
    pub p: f64,
    pub treatment_scale: f64,
    pub estimand: EstimandSpec,
    pub estimators: Vec<EstimatorConfig>,
    /// Draws for the Monte Carlo truth.
    pub truth_draws: usize,
    pub tmle: TmleConfig,
    /// Randomization probability handed to the estimators; `None` lets them
    /// estimate it.
    pub design_p: Option<f64>,
    /// Largest tolerated fraction of failed replications per estimator and
    /// sample size.
    pub max_failure_rate: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sample_sizes: vec![100, 500, 1000],
            n_reps: 1000,
            master_seed: 20240101,
            t_max: 4,
            randomization: Randomization::default(),
            p: 0.5,
            treatment_scale: 1.0,
            estimand: EstimandSpec::new(EstimandKind::Rd, 3),
            estimators: vec![
                EstimatorConfig::km(),
                EstimatorConfig::tmle("TMLE-lasso-correct", HazardLearner::default(), CovariatePreset::Correct),
                EstimatorConfig::tmle("TMLE-lasso-all", HazardLearner::default(), CovariatePreset::All),
                EstimatorConfig::tmle("TMLE-lasso-incorrect", HazardLearner::default(), CovariatePreset::Incorrect),
            ],
            truth_draws: 10_000_000,
            tmle: TmleConfig::default(),
            design_p: None,
            max_failure_rate: 0.01,
        }
    }
}

impl StudyConfig {
    pub fn dgm(&self, n: usize, seed: u64) -> DgmConfig {
        DgmConfig { n, t_max: self.t_max, seed, randomization: self.randomization, p: self.p, treatment_scale: self.treatment_scale }
    }

    fn validate(&self) -> Result<()> {
        if self.n_reps == 0 || self.sample_sizes.is_empty() || self.estimators.is_empty() {
            return Err(Error::Argument("study needs replications, sample sizes and estimators".into()));
        }
        let mut labels: Vec<&str> = self.estimators.iter().map(|e| e.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("estimator labels must be unique".into()));
        }
        self.dgm(self.sample_sizes[0].max(4), 0).validate()?;
        if self.estimand.time > self.t_max {
            return Err(Error::Argument(format!("estimand time {} beyond t_max {}", self.estimand.time, self.t_max)));
        }
        Ok(())
    }
}

/// One estimator on one replicated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub n: usize,
    pub rep: usize,
    pub estimator: String,
    pub estimate: f64,
    pub var_simple: f64,
    pub var_stratified: f64,
    pub covered_simple: bool,
    pub covered_stratified: bool,
    /// Largest `|E_n[H (L - h)]|` over the targeted fits.
    pub max_abs_score: f64,
    /// Largest `|E_n[phi]|` over the targeted fits.
    pub max_abs_eif_mean: f64,
}

/// Aggregates for one estimator, variance flavor and sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub n: usize,
    pub estimator: String,
    pub variance: String,
    pub reps: usize,
    pub failures: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// Mean per-observation variance.
    pub mean_variance: f64,
    /// Mean KM simple-randomization variance over this mean variance.
    pub relative_efficiency: f64,
    /// Fraction of replications whose variance is below the KM simple one.
    pub frac_re_above_one: f64,
    /// Mean of stratified over simple variance, per replication.
    pub mean_strat_simple_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub truth: f64,
    pub truth_se: f64,
    pub rows: Vec<SummaryRow>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<FailureNote>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureNote {
    pub n: usize,
    pub rep: usize,
    pub estimator: String,
    pub message: String,
}

impl McSummary {
    pub fn row(&self, n: usize, estimator: &str, variance: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.n == n && r.estimator == estimator && r.variance == variance)
    }

    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_replications_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs every estimator on `n_reps` fresh datasets per sample size.
///
/// Replication `r` at size `n` uses seed `derive_seed(master, [n, r])`, so
/// it can be rerun in isolation. Failed fits are logged and excluded; the
/// run fails if any estimator loses more than `max_failure_rate` of its
/// replications at some sample size.
pub fn run_study(cfg: &StudyConfig) -> Result<McSummary> {
    cfg.validate()?;
    let curves = true_curves(&cfg.dgm(4, 0), cfg.truth_draws, derive_seed(cfg.master_seed, &[0x7207]))?;
    let truth = curves.estimand(&cfg.estimand)?;
    let truth_se = if matches!(cfg.estimand.kind, EstimandKind::Rd) {
        curves.diff_se[cfg.estimand.time as usize - 1]
    } else {
        f64::NAN
    };
    let jobs: Vec<(usize, usize)> = cfg.sample_sizes.iter().flat_map(|&n| (0..cfg.n_reps).map(move |r| (n, r))).collect();
    type RepOutcome = Vec<(usize, std::result::Result<ReplicationRecord, String>)>;
    let outcomes: Vec<Result<RepOutcome>> = jobs
        .par_iter()
        .map(|&(n, rep)| {
            let seed = derive_seed(cfg.master_seed, &[n as u64, rep as u64]);
            let ds = generate_trial(&cfg.dgm(n, seed))?;
            let mut out = Vec::new();
            for (k, est) in cfg.estimators.iter().enumerate() {
                if !est.runs_at(n) {
                    continue;
                }
                let nuisance = est.nuisance(derive_seed(seed, &[k as u64 + 1]));
                let res = analyze(&ds, est.method, &nuisance, std::slice::from_ref(&cfg.estimand), &cfg.tmle, cfg.design_p);
                let rec = match res {
                    Ok((fit, results)) => {
                        let r = &results[0];
                        let covers = |lo: f64, hi: f64| lo <= truth && truth <= hi;
                        Ok(ReplicationRecord {
                            n,
                            rep,
                            estimator: est.label.clone(),
                            estimate: r.estimate,
                            var_simple: r.simple.variance,
                            var_stratified: r.stratified.variance,
                            covered_simple: covers(r.simple.ci_low, r.simple.ci_high),
                            covered_stratified: covers(r.stratified.ci_low, r.stratified.ci_high),
                            max_abs_score: fit.diagnostics.max_abs_score,
                            max_abs_eif_mean: fit.diagnostics.max_abs_eif_mean,
                        })
                    }
                    Err(e) => {
                        log::warn!("n = {n}, replication {rep}, {}: {e}", est.label);
                        Err(e.to_string())
                    }
                };
                out.push((k, rec));
            }
            Ok(out)
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (&(n, rep), outcome) in jobs.iter().zip(outcomes) {
        for (k, rec) in outcome? {
            match rec {
                Ok(r) => records.push(r),
                Err(message) => failures.push(FailureNote { n, rep, estimator: cfg.estimators[k].label.clone(), message }),
            }
        }
    }

    let km_label = cfg.estimators.iter().find(|e| e.method == Method::Km).map(|e| e.label.clone());
    let mut rows = Vec::new();
    for &n in &cfg.sample_sizes {
        let km: Vec<Option<f64>> = {
            let mut v = vec![None; cfg.n_reps];
            if let Some(label) = &km_label {
                for r in records.iter().filter(|r| r.n == n && &r.estimator == label) {
                    v[r.rep] = Some(r.var_simple);
                }
            }
            v
        };
        let km_mean = {
            let vals: Vec<f64> = km.iter().flatten().copied().collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        for est in cfg.estimators.iter().filter(|e| e.runs_at(n)) {
            let recs: Vec<&ReplicationRecord> = records.iter().filter(|r| r.n == n && r.estimator == est.label).collect();
            let n_fail = failures.iter().filter(|f| f.n == n && f.estimator == est.label).count();
            if n_fail as f64 > cfg.max_failure_rate * cfg.n_reps as f64 {
                return Err(Error::Estimation(format!(
                    "{} failed in {n_fail} of {} replications at n = {n}",
                    est.label, cfg.n_reps
                )));
            }
            if recs.is_empty() {
                continue;
            }
            let m = recs.len() as f64;
            let mean_est = recs.iter().map(|r| r.estimate).sum::<f64>() / m;
            let sd = if recs.len() > 1 {
                (recs.iter().map(|r| (r.estimate - mean_est).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            let ratio = recs.iter().map(|r| r.var_stratified / r.var_simple).sum::<f64>() / m;
            for flavor in ["simple", "stratified"] {
                let var = |r: &ReplicationRecord| if flavor == "simple" { r.var_simple } else { r.var_stratified };
                let mean_var = recs.iter().map(|r| var(r)).sum::<f64>() / m;
                let mean_se = recs.iter().map(|r| (var(r) / n as f64).sqrt()).sum::<f64>() / m;
                let covered = recs
                    .iter()
                    .filter(|r| if flavor == "simple" { r.covered_simple } else { r.covered_stratified })
                    .count() as f64
                    / m;
                let paired: Vec<bool> =
                    recs.iter().filter_map(|r| km[r.rep].map(|k| k / var(r) > 1.0)).collect();
                let frac_re = if paired.is_empty() {
                    f64::NAN
                } else {
                    paired.iter().filter(|&&b| b).count() as f64 / paired.len() as f64
                };
                rows.push(SummaryRow {
                    n,
                    estimator: est.label.clone(),
                    variance: flavor.into(),
                    reps: recs.len(),
                    failures: n_fail,
                    truth,
                    mean_estimate: mean_est,
                    bias: mean_est - truth,
                    empirical_sd: sd,
                    mean_se,
                    coverage: covered,
                    mean_variance: mean_var,
                    relative_efficiency: km_mean / mean_var,
                    frac_re_above_one: frac_re,
                    mean_strat_simple_ratio: ratio,
                });
            }
        }
    }
    // KM simple is the reference by definition
    if let Some(label) = &km_label {
        for r in rows.iter_mut().filter(|r| &r.estimator == label && r.variance == "simple") {
            r.relative_efficiency = 1.0;
        }
    }
    Ok(McSummary { truth, truth_se, rows, records, failures })
}
