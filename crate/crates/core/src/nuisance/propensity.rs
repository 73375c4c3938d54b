//! Stratum-wise parametric treatment model.

use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::linalg::Design;
use crate::nuisance::logistic::fit_logistic;

/// Covariates of the per-stratum logistic model; empty means intercept-only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensitySpec {
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityModel {
    /// `p_A(1, X_i)` per subject, after truncation.
    pub treated: Vec<f64>,
    /// Per-stratum coefficients (intercept first); empty under a design override.
    pub coef: Vec<Vec<f64>>,
    pub design: Option<f64>,
    pub bound: f64,
}

impl PropensityModel {
    /// `p_A(a, X_i)`.
    pub fn prob(&self, subject: usize, a: u8) -> f64 {
        let p = self.treated[subject];
        if a == 1 {
            p
        } else {
            1.0 - p
        }
    }
}

/// Fits `P(A = 1 | X)` separately within each stratum, or uses the design
/// probability when one is declared.
pub fn fit_propensity(
    ds: &TrialDataset,
    spec: &PropensitySpec,
    design_p: Option<f64>,
    bound: f64,
) -> Result<PropensityModel> {
    let clamp = |p: f64| p.clamp(bound, 1.0 - bound);
    if let Some(p) = design_p {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Argument(format!("design probability {p} outside (0, 1)")));
        }
        return Ok(PropensityModel { treated: vec![clamp(p); ds.n()], coef: Vec::new(), design: Some(p), bound });
    }
    let cols: Vec<usize> = spec
        .covariates
        .iter()
        .map(|c| ds.covariate_index(c).ok_or_else(|| Error::Argument(format!("unknown propensity covariate `{c}`"))))
        .collect::<Result<_>>()?;
    let counts = ds.cell_counts();
    let mut treated = vec![0.0; ds.n()];
    let mut coef = Vec::with_capacity(ds.n_strata());
    for (w, cell) in counts.iter().enumerate() {
        for arm in 0..2u8 {
            if cell[arm as usize] == 0 {
                return Err(Error::Positivity { stratum: ds.stratum_levels[w].clone(), arm });
            }
        }
        let members: Vec<usize> = (0..ds.n()).filter(|&i| ds.subjects[i].stratum == w).collect();
        if cols.is_empty() {
            let p = cell[1] as f64 / (cell[0] + cell[1]) as f64;
            for &i in &members {
                treated[i] = clamp(p);
            }
            coef.push(vec![(p / (1.0 - p)).ln()]);
            continue;
        }
        let m = members.len();
        let mut data = vec![1.0; m * (cols.len() + 1)];
        for (j, &c) in cols.iter().enumerate() {
            for (r, &i) in members.iter().enumerate() {
                data[(j + 1) * m + r] = ds.subjects[i].x[c];
            }
        }
        let mut names = vec!["(intercept)".to_string()];
        names.extend(spec.covariates.iter().cloned());
        let design = Design { n_rows: m, names, data };
        let y: Vec<f64> = members.iter().map(|&i| ds.subjects[i].a as f64).collect();
        let fit = fit_logistic(&design, &y)?;
        for (r, &i) in members.iter().enumerate() {
            treated[i] = clamp(crate::stats::expit(design.row_dot(r, &fit.coef)));
        }
        coef.push(fit.coef);
    }
    Ok(PropensityModel { treated, coef, design: None, bound })
}
