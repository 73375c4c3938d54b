//! Average treatment effect of a scalar outcome under stratified
//! randomization: AIPW, TMLE and the usual unadjusted and ANCOVA baselines.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, column_index, index_levels, parse_real, read_common, SubjectRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::linalg::{dependent_columns, Design};
use crate::nuisance::forest::fit_forest;
use crate::nuisance::lasso::fit_lasso_cv;
use crate::nuisance::{
    fit_propensity, FeatureMap, FeatureSpec, Family, ForestParams, LassoParams, PropensityModel, PropensitySpec,
    TimeEncoding, PROB_BOUND,
};
use crate::rng::{derive_seed, rng_for};
use crate::stats::{expit, logit, Inference};
use crate::tmle::fluctuate;

/// Column names of a scalar-outcome trial table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanSchema {
    pub id: Option<String>,
    pub arm: String,
    pub outcome: String,
    pub stratum: String,
    pub covariates: Option<Vec<String>>,
}

impl Default for MeanSchema {
    fn default() -> Self {
        Self { id: None, arm: "a".into(), outcome: "y".into(), stratum: "w".into(), covariates: None }
    }
}

/// Subjects with a real-valued outcome. Covariates, strata and arms live in
/// `base`, whose time and event fields are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTrialDataset {
    pub base: TrialDataset,
    pub y: Vec<f64>,
}

impl MeanTrialDataset {
    pub fn new(base: TrialDataset, y: Vec<f64>) -> Result<Self> {
        if y.len() != base.n() {
            return Err(Error::Schema(format!("{} outcomes for {} subjects", y.len(), base.n())));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Missing { line: i + 2, column: "outcome".into() });
        }
        Ok(Self { base, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn arm(&self, i: usize) -> u8 {
        self.base.subjects[i].a
    }
}

pub fn parse_mean_dataset(bytes: &[u8], schema: &MeanSchema) -> Result<MeanTrialDataset> {
    let table = read_common(
        bytes,
        schema.id.as_deref(),
        &schema.arm,
        &schema.stratum,
        &[schema.outcome.as_str()],
        schema.covariates.as_deref(),
    )?;
    let y_idx = column_index(&table.headers, &schema.outcome)?;
    let y = table
        .rows
        .iter()
        .map(|r| parse_real(r.record.get(y_idx).unwrap_or(""), r.line, &schema.outcome))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = table.rows.iter().map(|r| r.stratum_label.clone()).collect();
    let (levels, strata) = index_levels(&labels);
    let subjects = table
        .rows
        .into_iter()
        .zip(strata)
        .map(|(row, stratum)| SubjectRecord { id: row.id, x: row.x, stratum, a: row.a, u: 1, delta: 0 })
        .collect();
    let base = TrialDataset::new(subjects, 1, table.covariate_names, levels)?;
    MeanTrialDataset::new(base, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutcomeLearner {
    /// Ordinary least squares.
    #[default]
    Linear,
    Lasso(LassoParams),
    RandomForest(ForestParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeSpec {
    pub learner: OutcomeLearner,
    /// Regressors of the outcome model; the arm should be included.
    pub features: FeatureSpec,
    pub propensity: PropensitySpec,
    pub propensity_bound: f64,
    /// Cross-fitting folds for the outcome model.
    pub folds: usize,
    pub seed: u64,
}

impl Default for OutcomeSpec {
    fn default() -> Self {
        Self {
            learner: OutcomeLearner::Linear,
            features: FeatureSpec { time: TimeEncoding::None, ..FeatureSpec::default() },
            propensity: PropensitySpec::default(),
            propensity_bound: PROB_BOUND,
            folds: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AteResult {
    pub method: String,
    pub estimate: f64,
    pub simple: Inference,
    /// Equal to `simple` for the baselines, which have no stratified flavor.
    pub stratified: Inference,
    pub correction: f64,
    /// Fluctuation parameters (arm 0, arm 1) for TMLE.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<[f64; 2]>,
    #[serde(skip)]
    pub if_values: Vec<f64>,
}

/// Ordinary least squares; returns coefficients and `(X'X)^-1`.
fn ols(design: &Design, y: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let dep = dependent_columns(design);
    if !dep.is_empty() {
        return Err(Error::RankDeficient { columns: dep.iter().map(|&j| design.names[j].clone()).collect() });
    }
    let x = design.to_matrix();
    let xtx = x.transpose() * &x;
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient { columns: design.names.clone() })?;
    let coef = &inv * (x.transpose() * DVector::from_column_slice(y));
    Ok((coef.iter().copied().collect(), inv))
}

enum OutcomeModel {
    Linear { map: FeatureMap, coef: Vec<f64> },
    Forest { map: FeatureMap, forest: crate::nuisance::forest::Forest },
}

impl OutcomeModel {
    fn predict(&self, s: &SubjectRecord, arm: u8) -> f64 {
        match self {
            Self::Linear { map, coef } => map.linear_predictor(coef, s, 1, arm),
            Self::Forest { map, forest } => {
                let mut row = vec![0.0; map.len()];
                map.fill(s, 1, arm, &mut row);
                forest.predict(&row)
            }
        }
    }
}

fn fit_outcome(ds: &MeanTrialDataset, train: &[usize], spec: &OutcomeSpec, seed: u64) -> Result<OutcomeModel> {
    let features = FeatureSpec { time: TimeEncoding::None, ..spec.features.clone() };
    let intercept = !matches!(spec.learner, OutcomeLearner::RandomForest(_));
    let map = FeatureMap::build(&features, &ds.base, intercept)?;
    let subjects: Vec<&SubjectRecord> = train.iter().map(|&i| &ds.base.subjects[i]).collect();
    let design = map.subject_design(&subjects);
    let y: Vec<f64> = train.iter().map(|&i| ds.y[i]).collect();
    match &spec.learner {
        OutcomeLearner::Linear => {
            let (coef, _) = ols(&design, &y)?;
            Ok(OutcomeModel::Linear { map, coef })
        }
        OutcomeLearner::Lasso(p) => {
            let n_folds = p.cv_folds.max(1);
            let row_fold = if n_folds > 1 {
                let sub = ds.base.subset(train);
                assign_folds(&sub, n_folds, seed)?.fold_of
            } else {
                Vec::new()
            };
            let fit = fit_lasso_cv(&design, &y, map.penalized(), Family::Gaussian, &p.lambda_grid, &row_fold, n_folds)?;
            Ok(OutcomeModel::Linear { map, coef: fit.coef })
        }
        OutcomeLearner::RandomForest(p) => {
            let forest = fit_forest(&design, &y, p, seed)?;
            Ok(OutcomeModel::Forest { map, forest })
        }
    }
}

/// Outcome predictions under each arm and the propensity model.
struct Nuisances {
    h: [Vec<f64>; 2],
    propensity: PropensityModel,
}

fn fit_nuisances(ds: &MeanTrialDataset, spec: &OutcomeSpec, design_p: Option<f64>) -> Result<Nuisances> {
    let n = ds.n();
    let propensity = fit_propensity(&ds.base, &spec.propensity, design_p, spec.propensity_bound)?;
    let folds = assign_folds(&ds.base, spec.folds.max(1), spec.seed)?;
    let models: Vec<Result<OutcomeModel>> = (0..folds.n_folds)
        .into_par_iter()
        .map(|k| {
            let train = if folds.n_folds == 1 { (0..n).collect() } else { folds.training(k) };
            fit_outcome(ds, &train, spec, derive_seed(spec.seed, &[0x0C, k as u64]))
        })
        .collect();
    let models = models.into_iter().collect::<Result<Vec<_>>>()?;
    let h = [0u8, 1].map(|a| {
        (0..n).map(|i| models[folds.fold_of[i]].predict(&ds.base.subjects[i], a)).collect::<Vec<f64>>()
    });
    Ok(Nuisances { h, propensity })
}

/// Simple and stratified variances of an ATE influence function whose
/// weighted-residual part uses residuals `resid` (arm-specific).
fn ate_variances(ds: &MeanTrialDataset, psi: &[f64], resid: &[f64], p: f64) -> (f64, f64, f64) {
    let n = ds.n();
    let k = ds.base.n_strata();
    let v_simple = psi.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut sum = vec![[0.0f64; 2]; k];
    let mut cnt = vec![[0usize; 2]; k];
    let mut weight = vec![0.0; k];
    for i in 0..n {
        let (w, a) = (ds.base.subjects[i].stratum, ds.arm(i) as usize);
        sum[w][a] += resid[i];
        cnt[w][a] += 1;
        weight[w] += 1.0 / n as f64;
    }
    let m = |w: usize, a: usize| if cnt[w][a] == 0 { 0.0 } else { sum[w][a] / cnt[w][a] as f64 };
    let g: Vec<f64> = (0..k).map(|w| m(w, 1) / p + m(w, 0) / (1.0 - p)).collect();
    let gbar: f64 = g.iter().zip(&weight).map(|(g, w)| g * w).sum();
    let correction = p * (1.0 - p) * g.iter().zip(&weight).map(|(g, w)| w * (g - gbar).powi(2)).sum::<f64>();
    let floor = 1e-12f64.min(v_simple);
    let mut v_strat = v_simple - correction;
    if v_strat < floor {
        log::warn!("stratified variance {v_strat:e} floored at {floor:e}");
        v_strat = floor;
    }
    (v_simple, v_strat, correction)
}

fn doubly_robust(
    ds: &MeanTrialDataset,
    method: &str,
    h: &[Vec<f64>; 2],
    prop: &PropensityModel,
    p: f64,
    alpha: f64,
    plug_in: bool,
) -> AteResult {
    let n = ds.n();
    let mut terms = vec![0.0; n];
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let a = ds.arm(i);
        let r = ds.y[i] - h[a as usize][i];
        resid[i] = r;
        let weighted = if a == 1 { r / prop.prob(i, 1) } else { -r / prop.prob(i, 0) };
        terms[i] = weighted + h[1][i] - h[0][i];
    }
    let estimate = if plug_in {
        (0..n).map(|i| h[1][i] - h[0][i]).sum::<f64>() / n as f64
    } else {
        terms.iter().sum::<f64>() / n as f64
    };
    let psi: Vec<f64> = terms.iter().map(|t| t - estimate).collect();
    let (vs, vw, correction) = ate_variances(ds, &psi, &resid, p);
    AteResult {
        method: method.into(),
        estimate,
        simple: Inference::wald(estimate, vs, n, alpha, 0.0),
        stratified: Inference::wald(estimate, vw, n, alpha, 0.0),
        correction,
        epsilon: None,
        if_values: psi,
    }
}

fn correction_p(ds: &MeanTrialDataset, design_p: Option<f64>) -> f64 {
    design_p.unwrap_or_else(|| ds.base.treated_fraction())
}

/// Augmented inverse-probability-weighted estimator of `E[Y(1)] - E[Y(0)]`.
pub fn aipw_ate(ds: &MeanTrialDataset, spec: &OutcomeSpec, design_p: Option<f64>, alpha: f64) -> Result<AteResult> {
    let nu = fit_nuisances(ds, spec, design_p)?;
    Ok(doubly_robust(ds, "AIPW", &nu.h, &nu.propensity, correction_p(ds, design_p), alpha, false))
}

const SCALE_LO: f64 = 0.005;
const SCALE_HI: f64 = 0.995;
const PRED_CLAMP: f64 = 1e-3;

/// Targeted estimator: outcomes and initial predictions are min-max scaled
/// into `[0.005, 0.995]`, each arm's predictions are fluctuated on the logit
/// scale with clever covariate `1/p_A(a, X)`, and the plug-in contrast is
/// mapped back.
pub fn tmle_ate(ds: &MeanTrialDataset, spec: &OutcomeSpec, design_p: Option<f64>, alpha: f64) -> Result<AteResult> {
    let nu = fit_nuisances(ds, spec, design_p)?;
    let p = correction_p(ds, design_p);
    // bounds cover the initial predictions too, so no prediction is clipped
    let all = || ds.y.iter().chain(&nu.h[0]).chain(&nu.h[1]).copied();
    let lo = all().fold(f64::INFINITY, f64::min);
    let hi = all().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        let mut r = doubly_robust(ds, "TMLE", &nu.h, &nu.propensity, p, alpha, false);
        r.epsilon = Some([0.0, 0.0]);
        return Ok(r);
    }
    let range = hi - lo;
    let to_unit = |v: f64| SCALE_LO + (SCALE_HI - SCALE_LO) * (v - lo) / range;
    let from_unit = |v: f64| lo + (v - SCALE_LO) * range / (SCALE_HI - SCALE_LO);
    let n = ds.n();
    let ys: Vec<f64> = ds.y.iter().map(|&v| to_unit(v)).collect();
    let mut eps = [0.0; 2];
    let mut h_star: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for a in 0..2u8 {
        let hs: Vec<f64> = nu.h[a as usize].iter().map(|&v| to_unit(v).clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)).collect();
        let rows: Vec<usize> = (0..n).filter(|&i| ds.arm(i) == a).collect();
        let offsets: Vec<f64> = rows.iter().map(|&i| logit(hs[i])).collect();
        let cov: Vec<f64> = rows.iter().map(|&i| 1.0 / nu.propensity.prob(i, a)).collect();
        let y: Vec<f64> = rows.iter().map(|&i| ys[i]).collect();
        let e = fluctuate(&offsets, &cov, &y)?;
        eps[a as usize] = e;
        h_star[a as usize] = (0..n)
            .map(|i| {
                let v = if e == 0.0 { hs[i] } else { expit(logit(hs[i]) + e / nu.propensity.prob(i, a)) };
                from_unit(v)
            })
            .collect();
    }
    let mut r = doubly_robust(ds, "TMLE", &h_star, &nu.propensity, p, alpha, true);
    r.epsilon = Some(eps);
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Difference of arm means.
    Dom,
    /// Regression on arm, all covariates and stratum indicators.
    AncovaFull,
    /// Regression on arm and stratum indicators.
    AncovaStrata,
}

impl Baseline {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Dom => "DoM",
            Self::AncovaFull => "ANCOVA-full",
            Self::AncovaStrata => "ANCOVA-strata",
        }
    }
}

/// Regression-free and least-squares comparators. ANCOVA variances use the
/// HC0 sandwich.
pub fn baseline(ds: &MeanTrialDataset, which: Baseline, alpha: f64) -> Result<AteResult> {
    let n = ds.n();
    let (estimate, variance) = match which {
        Baseline::Dom => {
            let arm_stats = |a: u8| {
                let v: Vec<f64> = (0..n).filter(|&i| ds.arm(i) == a).map(|i| ds.y[i]).collect();
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let s2 = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
                (m, s2, v.len() as f64)
            };
            let (m1, s1, n1) = arm_stats(1);
            let (m0, s0, n0) = arm_stats(0);
            (m1 - m0, n as f64 * (s1 / n1 + s0 / n0))
        }
        Baseline::AncovaFull | Baseline::AncovaStrata => {
            let features = FeatureSpec {
                time: TimeEncoding::None,
                arm: true,
                strata: true,
                covariates: if which == Baseline::AncovaFull { None } else { Some(Vec::new()) },
                interactions: Vec::new(),
            };
            let map = FeatureMap::build(&features, &ds.base, true)?;
            let subjects: Vec<&SubjectRecord> = ds.base.subjects.iter().collect();
            let design = map.subject_design(&subjects);
            let (coef, inv) = ols(&design, &ds.y)?;
            let x = design.to_matrix();
            let mut meat = DMatrix::<f64>::zeros(design.n_cols(), design.n_cols());
            for i in 0..n {
                let e = ds.y[i] - design.row_dot(i, &coef);
                let row = x.row(i);
                meat += (row.transpose() * row) * (e * e);
            }
            let cov = &inv * meat * &inv;
            let j = map.names().iter().position(|c| c == "a").expect("arm column present");
            (coef[j], n as f64 * cov[(j, j)])
        }
    };
    let inf = Inference::wald(estimate, variance, n, alpha, 0.0);
    Ok(AteResult {
        method: which.label().into(),
        estimate,
        simple: inf,
        stratified: inf,
        correction: 0.0,
        epsilon: None,
        if_values: Vec::new(),
    })
}

/// Linear-outcome trial with four equiprobable strata and `X ~ N(1, I_d)`:
/// `Y = X1 + X2/2 - X3/2 + X1^2/4 + delta_W + beta_a A + eps`, with
/// `delta = (0, 0.5, 1, 1.5)` and the noise variance set by `snr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanDgmConfig {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub beta_a: f64,
    pub snr: f64,
    pub p: f64,
}

impl Default for MeanDgmConfig {
    fn default() -> Self {
        Self { n: 1000, d: 10, seed: 1, beta_a: 1.0, snr: 3.0, p: 0.5 }
    }
}

const STRATUM_EFFECTS: [f64; 4] = [0.0, 0.5, 1.0, 1.5];

impl MeanDgmConfig {
    /// Variance of the arm-specific mean function over `(X, W)`.
    pub fn signal_variance() -> f64 {
        // X1 = 1 + Z: X1 + X1^2/4 = const + 1.5 Z + Z^2/4, variance 2.25 + 2/16
        let x_part = 2.25 + 0.125 + 0.25 + 0.25;
        let m = STRATUM_EFFECTS.iter().sum::<f64>() / 4.0;
        let s_part = STRATUM_EFFECTS.iter().map(|d| (d - m).powi(2)).sum::<f64>() / 4.0;
        x_part + s_part
    }

    pub fn mean_function(x: &[f64], stratum: usize) -> f64 {
        x[0] + 0.5 * x[1] - 0.5 * x[2] + 0.25 * x[0] * x[0] + STRATUM_EFFECTS[stratum]
    }
}

/// Draws one scalar-outcome trial with within-stratum balanced assignment.
pub fn generate_mean_trial(cfg: &MeanDgmConfig) -> Result<MeanTrialDataset> {
    if cfg.d < 3 || cfg.n < 8 || !(cfg.snr > 0.0) || !(cfg.p > 0.0 && cfg.p < 1.0) {
        return Err(Error::Argument("need d >= 3, n >= 8, snr > 0 and p in (0, 1)".into()));
    }
    let mut rng = rng_for(cfg.seed, &[0xD0]);
    let xn = Normal::new(1.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, (MeanDgmConfig::signal_variance() / cfg.snr).sqrt()).expect("valid normal");
    let strata: Vec<usize> = (0..cfg.n).map(|_| rng.gen_range(0..4)).collect();
    let xs: Vec<Vec<f64>> = (0..cfg.n).map(|_| (0..cfg.d).map(|_| xn.sample(&mut rng)).collect()).collect();
    let mut arms = vec![0u8; cfg.n];
    for w in 0..4 {
        let members: Vec<usize> = (0..cfg.n).filter(|&i| strata[i] == w).collect();
        let exact = members.len() as f64 * cfg.p;
        let n1 = exact.floor() as usize + (rng.gen::<f64>() < exact.fract()) as usize;
        let mut labels: Vec<u8> = (0..members.len()).map(|k| (k < n1) as u8).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        for (&i, l) in members.iter().zip(labels) {
            arms[i] = l;
        }
    }
    let mut y = Vec::with_capacity(cfg.n);
    let mut subjects = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        y.push(MeanDgmConfig::mean_function(&xs[i], strata[i]) + cfg.beta_a * arms[i] as f64 + noise.sample(&mut rng));
        subjects.push(SubjectRecord { id: (i + 1).to_string(), x: xs[i].clone(), stratum: strata[i], a: arms[i], u: 1, delta: 0 });
    }
    let base = TrialDataset::new(
        subjects,
        1,
        (1..=cfg.d).map(|j| format!("X{j}")).collect(),
        (1..=4).map(|w| w.to_string()).collect(),
    )?;
    MeanTrialDataset::new(base, y)
}

/// Outcome-model feature sets for the scalar-outcome simulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanPreset {
    /// The terms of the true mean function.
    Correct,
    /// Arm and the noise covariates only.
    Incorrect,
}

impl MeanPreset {
    pub fn features(&self, d: usize) -> FeatureSpec {
        match self {
            Self::Correct => FeatureSpec {
                time: TimeEncoding::None,
                arm: true,
                strata: true,
                covariates: Some(vec!["X1".into(), "X2".into(), "X3".into()]),
                interactions: vec![vec!["X1".into(), "X1".into()]],
            },
            Self::Incorrect => FeatureSpec {
                time: TimeEncoding::None,
                arm: true,
                strata: false,
                covariates: Some((4..=d).map(|j| format!("X{j}")).collect()),
                interactions: Vec::new(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum MeanMethod {
    Aipw { outcome: OutcomeSpec },
    Tmle { outcome: OutcomeSpec },
    Baseline { which: Baseline },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimatorConfig {
    pub label: String,
    #[serde(flatten)]
    pub method: MeanMethod,
}

/// Runs one configured estimator.
pub fn run_mean_method(ds: &MeanTrialDataset, method: &MeanMethod, design_p: Option<f64>, alpha: f64) -> Result<AteResult> {
    match method {
        MeanMethod::Aipw { outcome } => aipw_ate(ds, outcome, design_p, alpha),
        MeanMethod::Tmle { outcome } => tmle_ate(ds, outcome, design_p, alpha),
        MeanMethod::Baseline { which } => baseline(ds, *which, alpha),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanSummaryRow {
    pub estimator: String,
    pub variance: String,
    pub reps: usize,
    pub failures: usize,
    pub bias: f64,
    pub empirical_sd: f64,
    pub mean_variance: f64,
    pub coverage: f64,
}

/// Monte Carlo study on the scalar-outcome trial; the truth is `beta_a`.
pub fn run_mean_study(
    dgm: &MeanDgmConfig,
    estimators: &[MeanEstimatorConfig],
    n_reps: usize,
    master_seed: u64,
) -> Result<Vec<MeanSummaryRow>> {
    let truth = dgm.beta_a;
    let per_rep: Vec<Result<Vec<Option<AteResult>>>> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(master_seed, &[dgm.n as u64, r as u64]);
            let ds = generate_mean_trial(&MeanDgmConfig { seed, ..dgm.clone() })?;
            Ok(estimators
                .iter()
                .map(|e| match run_mean_method(&ds, &e.method, None, 0.05) {
                    Ok(res) => Some(res),
                    Err(err) => {
                        log::warn!("replication {r}, {}: {err}", e.label);
                        None
                    }
                })
                .collect())
        })
        .collect();
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (k, e) in estimators.iter().enumerate() {
        let res: Vec<&AteResult> = per_rep.iter().filter_map(|r| r[k].as_ref()).collect();
        let failures = n_reps - res.len();
        if failures as f64 > 0.01 * n_reps as f64 {
            return Err(Error::Estimation(format!("{} failed in {failures} of {n_reps} replications", e.label)));
        }
        let m = res.len() as f64;
        let mean = res.iter().map(|r| r.estimate).sum::<f64>() / m;
        let sd = (res.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt();
        for flavor in ["simple", "stratified"] {
            let inf = |r: &AteResult| if flavor == "simple" { r.simple } else { r.stratified };
            rows.push(MeanSummaryRow {
                estimator: e.label.clone(),
                variance: flavor.into(),
                reps: res.len(),
                failures,
                bias: mean - truth,
                empirical_sd: sd,
                mean_variance: res.iter().map(|r| inf(r).variance).sum::<f64>() / m,
                coverage: res.iter().filter(|r| inf(r).ci_low <= truth && truth <= inf(r).ci_high).count() as f64 / m,
            });
        }
    }
    Ok(rows)
}
