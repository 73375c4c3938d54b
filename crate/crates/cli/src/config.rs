//! JSON configs of the analysis commands.

use serde::{Deserialize, Serialize};

use strat_tte::analysis::Method;
use strat_tte::data::SchemaConfig;
use strat_tte::estimands::{EstimandKind, EstimandSpec};
use strat_tte::mean_outcome::{Baseline, MeanEstimatorConfig, MeanMethod, MeanPreset, MeanSchema, OutcomeLearner, OutcomeSpec};
use strat_tte::nuisance::{HazardLearner, NuisanceSpec};
use strat_tte::tmle::TmleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default)]
    pub nuisance: NuisanceSpec,
}

impl MethodConfig {
    /// Model column of the results table.
    pub fn model_label(&self) -> &'static str {
        match self.method {
            Method::Km => "--",
            Method::Tmle => self.nuisance.learner.label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub schema: SchemaConfig,
    /// Empty means the risk difference at the horizon.
    pub estimands: Vec<EstimandSpec>,
    pub methods: Vec<MethodConfig>,
    pub tmle: TmleConfig,
    /// Known randomization probability; `None` estimates it.
    pub design_p: Option<f64>,
    pub alpha: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            schema: SchemaConfig::default(),
            estimands: Vec::new(),
            methods: vec![
                MethodConfig {
                    method: Method::Km,
                    nuisance: NuisanceSpec { learner: HazardLearner::InterceptOnly, ..NuisanceSpec::default() },
                },
                MethodConfig { method: Method::Tmle, nuisance: NuisanceSpec::default() },
            ],
            tmle: TmleConfig::default(),
            design_p: None,
            alpha: 0.05,
        }
    }
}

impl AnalysisConfig {
    pub fn resolved_estimands(&self, horizon: u32) -> strat_tte::Result<Vec<EstimandSpec>> {
        if self.methods.is_empty() {
            return Err(strat_tte::Error::Argument("no methods configured".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) || self.alpha == 0.0 {
            return Err(strat_tte::Error::Argument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let mut out = if self.estimands.is_empty() {
            vec![EstimandSpec::new(EstimandKind::Rd, horizon)]
        } else {
            self.estimands.clone()
        };
        for e in &mut out {
            if e.time == 0 || e.time > horizon {
                return Err(strat_tte::Error::Argument(format!("estimand {e} outside 1..={horizon}")));
            }
            if self.estimands.is_empty() {
                e.alpha = self.alpha;
            }
        }
        Ok(out)
    }

    /// Seed recorded in the metadata: that of the first covariate-adjusted method.
    pub fn seed(&self) -> u64 {
        self.methods.iter().find(|m| m.method == Method::Tmle).map_or(0, |m| m.nuisance.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanAnalysisConfig {
    pub schema: MeanSchema,
    pub methods: Vec<MeanEstimatorConfig>,
    pub design_p: Option<f64>,
    pub alpha: f64,
}

impl Default for MeanAnalysisConfig {
    fn default() -> Self {
        let outcome = OutcomeSpec { features: MeanPreset::Correct.features(10), ..OutcomeSpec::default() };
        let lasso = OutcomeSpec { learner: OutcomeLearner::Lasso(Default::default()), ..outcome.clone() };
        Self {
            schema: MeanSchema::default(),
            methods: vec![
                MeanEstimatorConfig { label: "DoM".into(), method: MeanMethod::Baseline { which: Baseline::Dom } },
                MeanEstimatorConfig { label: "ANCOVA-strata".into(), method: MeanMethod::Baseline { which: Baseline::AncovaStrata } },
                MeanEstimatorConfig { label: "ANCOVA-full".into(), method: MeanMethod::Baseline { which: Baseline::AncovaFull } },
                MeanEstimatorConfig { label: "AIPW".into(), method: MeanMethod::Aipw { outcome: outcome.clone() } },
                MeanEstimatorConfig { label: "TMLE".into(), method: MeanMethod::Tmle { outcome } },
                MeanEstimatorConfig { label: "TMLE-lasso".into(), method: MeanMethod::Tmle { outcome: lasso } },
            ],
            design_p: None,
            alpha: 0.05,
        }
    }
}

impl MeanAnalysisConfig {
    pub fn seed(&self) -> u64 {
        self.methods
            .iter()
            .find_map(|m| match &m.method {
                MeanMethod::Aipw { outcome } | MeanMethod::Tmle { outcome } => Some(outcome.seed),
                MeanMethod::Baseline { .. } => None,
            })
            .unwrap_or(0)
    }
}

pub fn mean_model_label(m: &MeanMethod) -> &'static str {
    match m {
        MeanMethod::Baseline { .. } => "--",
        MeanMethod::Aipw { outcome } | MeanMethod::Tmle { outcome } => match outcome.learner {
            OutcomeLearner::Linear => "Linear",
            OutcomeLearner::Lasso(_) => "Lasso",
            OutcomeLearner::RandomForest(_) => "Forest",
        },
    }
}
