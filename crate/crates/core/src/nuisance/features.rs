//! Feature maps for person-period hazard models and subject-level outcome
//! models.

use serde::{Deserialize, Serialize};

use crate::data::{PersonTimeRow, SubjectRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::linalg::Design;

/// Maximum number of one-hot time indicators.
pub const MAX_TIME_INDICATORS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeEncoding {
    None,
    Linear,
    Indicators,
    /// Indicators for `t = 2..=31` plus a linear term. The linear term is
    /// dropped when the indicators already saturate the time grid, since it
    /// would be collinear with them.
    #[default]
    Both,
}

/// Declarative description of the regressors of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub time: TimeEncoding,
    pub arm: bool,
    /// One-hot stratum indicators (first level is the reference).
    pub strata: bool,
    /// Covariate names; `None` means every covariate.
    pub covariates: Option<Vec<String>>,
    /// Product terms. Each factor is `t`, `a`, `stratum=<label>` or a
    /// covariate name.
    pub interactions: Vec<Vec<String>>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { time: TimeEncoding::Both, arm: true, strata: true, covariates: None, interactions: Vec::new() }
    }
}

impl FeatureSpec {
    /// No regressors beyond those implied by the time encoding.
    pub fn empty() -> Self {
        Self {
            time: TimeEncoding::None,
            arm: false,
            strata: false,
            covariates: Some(Vec::new()),
            interactions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Atom {
    Time,
    Arm,
    Stratum(usize),
    Covariate(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Column {
    Intercept,
    TimeLinear,
    TimeIndicator(u32),
    Product(Vec<Atom>),
}

/// A `FeatureSpec` resolved against a dataset's covariates and strata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    columns: Vec<Column>,
    names: Vec<String>,
    penalized: Vec<bool>,
}

impl FeatureMap {
    /// Resolves `spec` against `ds`. The intercept, when requested, is
    /// always column 0.
    pub fn build(spec: &FeatureSpec, ds: &TrialDataset, intercept: bool) -> Result<Self> {
        Self::build_from_parts(spec, &ds.covariate_names, &ds.stratum_levels, ds.horizon, intercept)
    }

    pub fn build_from_parts(
        spec: &FeatureSpec,
        covariate_names: &[String],
        stratum_levels: &[String],
        horizon: u32,
        intercept: bool,
    ) -> Result<Self> {
        let mut map = FeatureMap { columns: Vec::new(), names: Vec::new(), penalized: Vec::new() };
        if intercept {
            map.push(Column::Intercept, "(intercept)".into(), false);
        }
        let last_indicator = horizon.min(MAX_TIME_INDICATORS + 1);
        let indicators = matches!(spec.time, TimeEncoding::Indicators | TimeEncoding::Both);
        if indicators {
            for t in 2..=last_indicator {
                map.push(Column::TimeIndicator(t), format!("t={t}"), false);
            }
        }
        let linear = match spec.time {
            TimeEncoding::Linear => horizon > 1,
            TimeEncoding::Both => horizon > MAX_TIME_INDICATORS + 1,
            _ => false,
        };
        if linear {
            map.push(Column::TimeLinear, "t".into(), false);
        }
        if spec.arm {
            map.push(Column::Product(vec![Atom::Arm]), "a".into(), false);
        }
        if spec.strata {
            for (s, label) in stratum_levels.iter().enumerate().skip(1) {
                map.push(Column::Product(vec![Atom::Stratum(s)]), format!("stratum={label}"), true);
            }
        }
        let lookup = |name: &str| -> Result<usize> {
            covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Argument(format!("unknown covariate `{name}` in feature spec")))
        };
        let covs: Vec<usize> = match &spec.covariates {
            None => (0..covariate_names.len()).collect(),
            Some(names) => names.iter().map(|n| lookup(n)).collect::<Result<_>>()?,
        };
        for j in covs {
            map.push(Column::Product(vec![Atom::Covariate(j)]), covariate_names[j].clone(), true);
        }
        for term in &spec.interactions {
            if term.is_empty() {
                continue;
            }
            let atoms = term
                .iter()
                .map(|f| match f.as_str() {
                    "t" => Ok(Atom::Time),
                    "a" => Ok(Atom::Arm),
                    s if s.starts_with("stratum=") => {
                        let label = &s["stratum=".len()..];
                        stratum_levels
                            .iter()
                            .position(|l| l == label)
                            .map(Atom::Stratum)
                            .ok_or_else(|| Error::Argument(format!("unknown stratum level `{label}`")))
                    }
                    name => lookup(name).map(Atom::Covariate),
                })
                .collect::<Result<Vec<_>>>()?;
            map.push(Column::Product(atoms), term.join(":"), true);
        }
        Ok(map)
    }

    fn push(&mut self, c: Column, name: String, penalized: bool) {
        self.columns.push(c);
        self.names.push(name);
        self.penalized.push(penalized);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Whether each column is subject to a sparsity penalty (intercept, time
    /// terms and the arm main effect are not).
    pub fn penalized(&self) -> &[bool] {
        &self.penalized
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    fn atom(atom: Atom, s: &SubjectRecord, t: u32, arm: u8) -> f64 {
        match atom {
            Atom::Time => t as f64,
            Atom::Arm => arm as f64,
            Atom::Stratum(k) => (s.stratum == k) as u8 as f64,
            Atom::Covariate(j) => s.x[j],
        }
    }

    /// Writes the feature vector of `subject` at time `t` with arm set to `arm`.
    pub fn fill(&self, s: &SubjectRecord, t: u32, arm: u8, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.columns) {
            *o = match c {
                Column::Intercept => 1.0,
                Column::TimeLinear => t as f64,
                Column::TimeIndicator(k) => (t == *k) as u8 as f64,
                Column::Product(atoms) => atoms.iter().map(|&a| Self::atom(a, s, t, arm)).product(),
            };
        }
    }

    pub fn linear_predictor(&self, coef: &[f64], s: &SubjectRecord, t: u32, arm: u8) -> f64 {
        self.columns
            .iter()
            .zip(coef)
            .map(|(c, b)| {
                let v = match c {
                    Column::Intercept => 1.0,
                    Column::TimeLinear => t as f64,
                    Column::TimeIndicator(k) => (t == *k) as u8 as f64,
                    Column::Product(atoms) => atoms.iter().map(|&a| Self::atom(a, s, t, arm)).product(),
                };
                v * b
            })
            .sum()
    }

    /// Column-major design over person-period rows, using each row's own arm.
    pub fn design(&self, ds: &TrialDataset, rows: &[PersonTimeRow]) -> Design {
        let n = rows.len();
        let p = self.len();
        let mut data = vec![0.0; n * p];
        let mut buf = vec![0.0; p];
        for (i, r) in rows.iter().enumerate() {
            self.fill(&ds.subjects[r.subject], r.t, r.a, &mut buf);
            for j in 0..p {
                data[j * n + i] = buf[j];
            }
        }
        Design { n_rows: n, names: self.names.clone(), data }
    }

    /// Column-major subject-level design (time fixed at 1, arm as observed).
    pub fn subject_design(&self, subjects: &[&SubjectRecord]) -> Design {
        let n = subjects.len();
        let p = self.len();
        let mut data = vec![0.0; n * p];
        let mut buf = vec![0.0; p];
        for (i, s) in subjects.iter().enumerate() {
            self.fill(s, 1, s.a, &mut buf);
            for j in 0..p {
                data[j * n + i] = buf[j];
            }
        }
        Design { n_rows: n, names: self.names.clone(), data }
    }
}
