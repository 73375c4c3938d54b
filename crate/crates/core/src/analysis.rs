//! One-call analysis of a trial: fit nuisances, target the needed curve
//! points and evaluate estimands.

use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::Result;
use crate::estimands::{estimate, EstimandResult, EstimandSpec};
use crate::nuisance::{fit_nuisances, NuisanceSpec};
use crate::tmle::{km_baseline, tmle_survival_curve, TargetedFit, TmleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Unadjusted product-limit estimator.
    Km,
    Tmle,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Km => "KM",
            Self::Tmle => "TMLE",
        }
    }
}

/// Union of the target times required by `estimands`, sorted.
pub fn target_times(estimands: &[EstimandSpec]) -> Vec<u32> {
    let mut times: Vec<u32> = estimands.iter().flat_map(|e| e.required_times()).collect();
    times.sort_unstable();
    times.dedup();
    times
}

/// Fits `method` and evaluates every estimand on the same targeted fit.
pub fn analyze(
    ds: &TrialDataset,
    method: Method,
    nuisance: &NuisanceSpec,
    estimands: &[EstimandSpec],
    tmle: &TmleConfig,
    design_p: Option<f64>,
) -> Result<(TargetedFit, Vec<EstimandResult>)> {
    let times = target_times(estimands);
    let fit = match method {
        Method::Km => km_baseline(ds, &times, tmle, design_p)?,
        Method::Tmle => {
            let bundle = fit_nuisances(ds, nuisance, design_p)?;
            tmle_survival_curve(ds, &bundle, &times, tmle, design_p)?
        }
    };
    let results = estimands.iter().map(|e| estimate(&fit, e)).collect::<Result<Vec<_>>>()?;
    Ok((fit, results))
}
