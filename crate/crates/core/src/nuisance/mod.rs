//! Nuisance models for survival TMLE: the conditional discrete hazard, the
//! censoring NPMLE and the stratum-wise propensity score.

pub mod censoring;
pub mod features;
pub mod forest;
pub mod lasso;
pub mod logistic;
pub mod propensity;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, expand_long, FoldAssignment, PersonTimeRow, SubjectRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::stats::expit;

pub use censoring::CensoringModel;
pub use features::{FeatureMap, FeatureSpec, TimeEncoding};
pub use forest::ForestParams;
pub use lasso::{Family, LambdaGrid};
pub use propensity::{fit_propensity, PropensityModel, PropensitySpec};

/// Default truncation bound for hazards and propensities.
pub const PROB_BOUND: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoParams {
    pub lambda_grid: LambdaGrid,
    /// Subject-level folds for choosing lambda.
    pub cv_folds: usize,
}

impl Default for LassoParams {
    fn default() -> Self {
        Self { lambda_grid: LambdaGrid::default(), cv_folds: 5 }
    }
}

/// Which estimator fits the conditional hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HazardLearner {
    /// Empirical hazard per (time, arm) cell; no covariates.
    InterceptOnly,
    PooledLogistic,
    Lasso(LassoParams),
    RandomForest(ForestParams),
}

impl Default for HazardLearner {
    fn default() -> Self {
        HazardLearner::Lasso(LassoParams::default())
    }
}

impl HazardLearner {
    pub fn label(&self) -> &'static str {
        match self {
            HazardLearner::InterceptOnly => "Intercept",
            HazardLearner::PooledLogistic => "Pooled",
            HazardLearner::Lasso(_) => "Lasso",
            HazardLearner::RandomForest(_) => "Forest",
        }
    }
}

/// A fitted conditional hazard `h(t, a, X)`.
#[derive(Debug, Clone)]
pub enum HazardModel {
    /// `table[t-1][a]`, untruncated so that it reproduces product-limit
    /// estimates exactly.
    Cells { table: Vec<[f64; 2]> },
    Linear { map: FeatureMap, coef: Vec<f64>, bound: f64 },
    Forest { map: FeatureMap, forest: forest::Forest, bound: f64 },
}

impl HazardModel {
    pub fn predict(&self, s: &SubjectRecord, t: u32, arm: u8) -> f64 {
        match self {
            HazardModel::Cells { table } => table.get(t as usize - 1).map_or(0.0, |c| c[arm as usize]),
            HazardModel::Linear { map, coef, bound } => {
                expit(map.linear_predictor(coef, s, t, arm)).clamp(*bound, 1.0 - bound)
            }
            HazardModel::Forest { map, forest, bound } => {
                let mut row = vec![0.0; map.len()];
                map.fill(s, t, arm, &mut row);
                forest.predict(&row).clamp(*bound, 1.0 - bound)
            }
        }
    }
}

/// What was fitted, for output metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModelSummary {
    pub kind: String,
    pub features: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Penalized columns with nonzero coefficients (lasso only).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub selected: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub coefficients: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_trees: Option<usize>,
}

/// Empirical hazard per (time, arm); empty risk sets give 0.
pub fn fit_cell_hazard(rows: &[PersonTimeRow], horizon: u32) -> HazardModel {
    let t_max = horizon as usize;
    let mut at_risk = vec![[0usize; 2]; t_max];
    let mut events = vec![[0usize; 2]; t_max];
    for r in rows {
        at_risk[r.t as usize - 1][r.a as usize] += 1;
        events[r.t as usize - 1][r.a as usize] += r.event as usize;
    }
    let table = (0..t_max)
        .map(|k| [0, 1].map(|a| if at_risk[k][a] == 0 { 0.0 } else { events[k][a] as f64 / at_risk[k][a] as f64 }))
        .collect();
    HazardModel::Cells { table }
}

fn event_vector(rows: &[PersonTimeRow]) -> Vec<f64> {
    rows.iter().map(|r| r.event as u8 as f64).collect()
}

pub fn fit_pooled_logistic(
    ds: &TrialDataset,
    rows: &[PersonTimeRow],
    spec: &FeatureSpec,
    bound: f64,
) -> Result<(HazardModel, ModelSummary)> {
    let map = FeatureMap::build(spec, ds, true)?;
    let design = map.design(ds, rows);
    let fit = logistic::fit_logistic(&design, &event_vector(rows))?;
    let summary = ModelSummary {
        kind: "pooled-logistic".into(),
        features: map.names().to_vec(),
        coefficients: fit.coef.clone(),
        ..Default::default()
    };
    Ok((HazardModel::Linear { map, coef: fit.coef, bound }, summary))
}

pub fn fit_lasso_hazard(
    ds: &TrialDataset,
    rows: &[PersonTimeRow],
    spec: &FeatureSpec,
    params: &LassoParams,
    seed: u64,
    bound: f64,
) -> Result<(HazardModel, ModelSummary)> {
    let map = FeatureMap::build(spec, ds, true)?;
    let design = map.design(ds, rows);
    let y = event_vector(rows);
    let n_folds = params.cv_folds.max(1);
    let row_fold: Vec<usize> = if n_folds > 1 {
        let folds = assign_folds(ds, n_folds, seed)?;
        rows.iter().map(|r| folds.fold_of[r.subject]).collect()
    } else {
        Vec::new()
    };
    let fit = lasso::fit_lasso_cv(&design, &y, map.penalized(), Family::Binomial, &params.lambda_grid, &row_fold, n_folds)?;
    let selected = map
        .names()
        .iter()
        .zip(map.penalized())
        .zip(&fit.coef)
        .filter(|((_, &pen), &b)| pen && b != 0.0)
        .map(|((name, _), _)| name.clone())
        .collect();
    let summary = ModelSummary {
        kind: "lasso".into(),
        features: map.names().to_vec(),
        lambda: Some(fit.lambda),
        selected,
        coefficients: fit.coef.clone(),
        n_trees: None,
    };
    Ok((HazardModel::Linear { map, coef: fit.coef, bound }, summary))
}

pub fn fit_forest_hazard(
    ds: &TrialDataset,
    rows: &[PersonTimeRow],
    spec: &FeatureSpec,
    params: &ForestParams,
    seed: u64,
    bound: f64,
) -> Result<(HazardModel, ModelSummary)> {
    // time enters as a single ordered feature; indicators add nothing to trees
    let spec = FeatureSpec { time: TimeEncoding::Linear, ..spec.clone() };
    let map = FeatureMap::build(&spec, ds, false)?;
    let design = map.design(ds, rows);
    let forest = forest::fit_forest(&design, &event_vector(rows), params, seed)?;
    let summary = ModelSummary {
        kind: "random-forest".into(),
        features: map.names().to_vec(),
        n_trees: Some(forest.n_trees()),
        ..Default::default()
    };
    Ok((HazardModel::Forest { map, forest, bound }, summary))
}

/// Fits the chosen learner on `ds`.
pub fn fit_hazard(
    ds: &TrialDataset,
    learner: &HazardLearner,
    spec: &FeatureSpec,
    seed: u64,
    bound: f64,
) -> Result<(HazardModel, ModelSummary)> {
    let rows = expand_long(ds);
    match learner {
        HazardLearner::InterceptOnly => Ok((
            fit_cell_hazard(&rows, ds.horizon),
            ModelSummary { kind: "intercept-only".into(), ..Default::default() },
        )),
        HazardLearner::PooledLogistic => fit_pooled_logistic(ds, &rows, spec, bound),
        HazardLearner::Lasso(p) => fit_lasso_hazard(ds, &rows, spec, p, seed, bound),
        HazardLearner::RandomForest(p) => fit_forest_hazard(ds, &rows, spec, p, seed, bound),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceSpec {
    pub learner: HazardLearner,
    pub features: FeatureSpec,
    pub hazard_bound: f64,
    pub propensity: PropensitySpec,
    pub propensity_bound: f64,
    /// Cross-fitting folds; 1 fits and predicts on the full sample.
    pub folds: usize,
    pub seed: u64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            learner: HazardLearner::default(),
            features: FeatureSpec::default(),
            hazard_bound: PROB_BOUND,
            propensity: PropensitySpec::default(),
            propensity_bound: PROB_BOUND,
            folds: 1,
            seed: 1,
        }
    }
}

/// Initial hazard predictions `h(t, a, X_i)` for every subject, both arms
/// and `t = 1..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardTable {
    pub n: usize,
    pub horizon: u32,
    values: Vec<f64>,
}

impl HazardTable {
    pub fn from_fn(n: usize, horizon: u32, f: impl Fn(usize, u8, u32) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * 2 * horizon as usize);
        for i in 0..n {
            for a in 0..2u8 {
                for t in 1..=horizon {
                    values.push(f(i, a, t));
                }
            }
        }
        Self { n, horizon, values }
    }

    fn idx(&self, i: usize, a: u8, t: u32) -> usize {
        (i * 2 + a as usize) * self.horizon as usize + t as usize - 1
    }

    pub fn get(&self, i: usize, a: u8, t: u32) -> f64 {
        self.values[self.idx(i, a, t)]
    }

    /// Hazards of subject `i` under arm `a` for `t = 1..=horizon`.
    pub fn curve(&self, i: usize, a: u8) -> &[f64] {
        let k = self.idx(i, a, 1);
        &self.values[k..k + self.horizon as usize]
    }
}

/// Everything step 1 of the targeting procedure needs.
#[derive(Debug, Clone)]
pub struct NuisanceBundle {
    pub hazard: HazardTable,
    pub censoring: CensoringModel,
    pub propensity: PropensityModel,
    pub folds: FoldAssignment,
    /// One summary per fold.
    pub models: Vec<ModelSummary>,
}

/// Fits all nuisances. With more than one fold the hazard of each subject is
/// predicted by a model trained on the other folds; censoring and propensity
/// are always fit on the full sample.
pub fn fit_nuisances(ds: &TrialDataset, spec: &NuisanceSpec, design_p: Option<f64>) -> Result<NuisanceBundle> {
    let folds = assign_folds(ds, spec.folds.max(1), spec.seed)?;
    fit_nuisances_with_folds(ds, spec, design_p, folds)
}

pub fn fit_nuisances_with_folds(
    ds: &TrialDataset,
    spec: &NuisanceSpec,
    design_p: Option<f64>,
    folds: FoldAssignment,
) -> Result<NuisanceBundle> {
    let rows = expand_long(ds);
    let censoring = CensoringModel::fit(&rows, ds.horizon);
    let propensity = fit_propensity(ds, &spec.propensity, design_p, spec.propensity_bound)?;
    let n_folds = folds.n_folds;

    let fitted: Vec<Result<(HazardModel, ModelSummary)>> = (0..n_folds)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(spec.seed, &[0xA5, k as u64]);
            if n_folds == 1 {
                fit_hazard(ds, &spec.learner, &spec.features, seed, spec.hazard_bound)
            } else {
                let train = ds.subset(&folds.training(k));
                fit_hazard(&train, &spec.learner, &spec.features, seed, spec.hazard_bound)
            }
        })
        .collect();
    let mut models = Vec::with_capacity(n_folds);
    let mut summaries = Vec::with_capacity(n_folds);
    for (k, r) in fitted.into_iter().enumerate() {
        let (m, s) = r.map_err(|e| match e {
            Error::Estimation(msg) => Error::Estimation(format!("fold {k}: {msg}")),
            other => other,
        })?;
        models.push(m);
        summaries.push(s);
    }
    let hazard = HazardTable::from_fn(ds.n(), ds.horizon, |i, a, t| {
        models[folds.fold_of[i]].predict(&ds.subjects[i], t, a)
    });
    Ok(NuisanceBundle { hazard, censoring, propensity, folds, models: summaries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subj(id: usize, w: usize, a: u8, u: u32, delta: u8, x: f64) -> SubjectRecord {
        SubjectRecord { id: id.to_string(), x: vec![x], stratum: w, a, u, delta }
    }

    #[test]
    fn cell_hazard_counts() {
        let ds = TrialDataset::new(
            vec![subj(0, 0, 0, 1, 1, 0.0), subj(1, 0, 0, 2, 0, 0.0), subj(2, 0, 1, 2, 1, 0.0), subj(3, 0, 1, 2, 1, 0.0)],
            3,
            vec!["x".into()],
            vec!["s".into()],
        )
        .unwrap();
        let m = fit_cell_hazard(&expand_long(&ds), 3);
        let s = &ds.subjects[0];
        assert_eq!(m.predict(s, 1, 0), 0.5);
        assert_eq!(m.predict(s, 2, 0), 0.0);
        assert_eq!(m.predict(s, 2, 1), 1.0);
        assert_eq!(m.predict(s, 3, 1), 0.0);
    }

    #[test]
    fn learner_config_round_trip() {
        let json = r#"{"kind":"lasso","lambda_grid":[0.1,0.01],"cv_folds":3}"#;
        let l: HazardLearner = serde_json::from_str(json).unwrap();
        assert_eq!(l, HazardLearner::Lasso(LassoParams { lambda_grid: LambdaGrid::Explicit(vec![0.1, 0.01]), cv_folds: 3 }));
        let f: HazardLearner = serde_json::from_str(r#"{"kind":"random-forest","n_trees":5}"#).unwrap();
        assert!(matches!(f, HazardLearner::RandomForest(ForestParams { n_trees: 5, min_node: 10, .. })));
        let back: HazardLearner = serde_json::from_str(&serde_json::to_string(&l).unwrap()).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn hazard_predictions_are_truncated() {
        let subjects: Vec<SubjectRecord> =
            (0..40).map(|i| subj(i, i % 2, (i / 2 % 2) as u8, 1 + (i % 3) as u32, (i % 5 != 0) as u8, i as f64)).collect();
        let ds = TrialDataset::new(subjects, 3, vec!["x".into()], vec!["A".into(), "B".into()]).unwrap();
        let spec = NuisanceSpec {
            learner: HazardLearner::RandomForest(ForestParams { n_trees: 10, min_node: 1, ..Default::default() }),
            ..Default::default()
        };
        let b = fit_nuisances(&ds, &spec, None).unwrap();
        for i in 0..ds.n() {
            for a in 0..2 {
                for &h in b.hazard.curve(i, a) {
                    assert!((0.01..=0.99).contains(&h));
                }
            }
        }
    }
}
