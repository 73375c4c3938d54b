//! Trial data model: CSV ingestion and validation, discrete-time person-period
//! expansion, and stratum/arm-balanced fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Column mapping for the trial CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    /// Subject identifier column; `None` numbers subjects by row.
    pub id: Option<String>,
    pub arm: String,
    pub time: String,
    pub event: String,
    pub stratum: String,
    /// Covariate columns. `None` takes every column not named above.
    pub covariates: Option<Vec<String>>,
    /// Overrides the horizon (default: the largest observed time).
    pub horizon: Option<u32>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            id: Some("id".into()),
            arm: "a".into(),
            time: "u".into(),
            event: "delta".into(),
            stratum: "w".into(),
            covariates: None,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Baseline covariates, in `TrialDataset::covariate_names` order.
    pub x: Vec<f64>,
    /// Index into `TrialDataset::stratum_levels`.
    pub stratum: usize,
    pub a: u8,
    /// Observed discrete time, `1..=horizon`.
    pub u: u32,
    pub delta: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    pub subjects: Vec<SubjectRecord>,
    pub horizon: u32,
    pub covariate_names: Vec<String>,
    pub stratum_levels: Vec<String>,
}

/// One at-risk person-period. Rows exist for `t = 1..=u` of each subject,
/// so the at-risk indicator is 1 on every row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersonTimeRow {
    pub subject: usize,
    pub t: u32,
    pub event: bool,
    pub censor: bool,
    pub a: u8,
    pub stratum: usize,
}

/// Sorts labels numerically when every label parses as a number, otherwise
/// lexicographically.
pub(crate) fn sort_levels(levels: &mut [String]) {
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    if numeric.is_some() {
        levels.sort_by(|a, b| {
            let x: f64 = a.trim().parse().unwrap();
            let y: f64 = b.trim().parse().unwrap();
            x.total_cmp(&y).then_with(|| a.cmp(b))
        });
    } else {
        levels.sort();
    }
}

pub(crate) fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | "." | "null")
}

fn parse_binary(field: &str, line: usize, column: &str) -> Result<u8> {
    if is_missing(field) {
        return Err(Error::Missing { line, column: column.into() });
    }
    match field.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(Error::Value {
            line,
            column: column.into(),
            message: format!("expected 0 or 1, found `{field}`"),
        }),
    }
}

pub(crate) fn parse_real(field: &str, line: usize, column: &str) -> Result<f64> {
    if is_missing(field) {
        return Err(Error::Missing { line, column: column.into() });
    }
    let v: f64 = field.trim().parse().map_err(|_| Error::Value {
        line,
        column: column.into(),
        message: format!("not a number: `{field}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Value { line, column: column.into(), message: "non-finite value".into() });
    }
    Ok(v)
}

fn parse_time(field: &str, line: usize, column: &str) -> Result<u32> {
    let v = parse_real(field, line, column)?;
    if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
        return Err(Error::Value {
            line,
            column: column.into(),
            message: format!("time must be an integer >= 1, found `{field}` (discretize before loading)"),
        });
    }
    Ok(v as u32)
}

/// Fields shared by the survival and mean-outcome tables.
pub(crate) struct CommonRow {
    pub line: usize,
    pub id: String,
    pub stratum_label: String,
    pub a: u8,
    pub x: Vec<f64>,
    pub record: csv::StringRecord,
}

pub(crate) struct CommonTable {
    pub covariate_names: Vec<String>,
    pub rows: Vec<CommonRow>,
    pub headers: Vec<String>,
}

pub(crate) fn column_index(headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

/// Reads the header, resolves id/arm/stratum/covariate columns and parses
/// them. `outcome_columns` are reserved names excluded from the default
/// covariate set; the caller parses them from `CommonRow::record`.
pub(crate) fn read_common(
    bytes: &[u8],
    id: Option<&str>,
    arm: &str,
    stratum: &str,
    outcome_columns: &[&str],
    covariates: Option<&[String]>,
) -> Result<CommonTable> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(Error::Schema("input is empty; a header row is required".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(bytes);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let id_idx = id.map(|c| column_index(&headers, c)).transpose()?;
    let arm_idx = column_index(&headers, arm)?;
    let stratum_idx = column_index(&headers, stratum)?;
    for c in outcome_columns {
        column_index(&headers, c)?;
    }
    let covariate_names: Vec<String> = match covariates {
        Some(names) => names.to_vec(),
        None => headers
            .iter()
            .filter(|h| {
                Some(h.as_str()) != id
                    && h.as_str() != arm
                    && h.as_str() != stratum
                    && !outcome_columns.contains(&h.as_str())
            })
            .cloned()
            .collect(),
    };
    let cov_idx: Vec<usize> =
        covariate_names.iter().map(|c| column_index(&headers, c)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("");
        let id = match id_idx {
            Some(i) => get(i).to_string(),
            None => (k + 1).to_string(),
        };
        let a = parse_binary(get(arm_idx), line, arm)?;
        let stratum_label = get(stratum_idx).trim().to_string();
        if is_missing(&stratum_label) {
            return Err(Error::Missing { line, column: stratum.into() });
        }
        let x = cov_idx
            .iter()
            .zip(&covariate_names)
            .map(|(&i, name)| parse_real(get(i), line, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(CommonRow { line, id, stratum_label, a, x, record });
    }
    if rows.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    Ok(CommonTable { covariate_names, rows, headers })
}

/// Checks that every stratum has at least one subject per arm.
pub(crate) fn check_positivity(strata: &[usize], arms: &[u8], levels: &[String]) -> Result<()> {
    let mut counts = vec![[0usize; 2]; levels.len()];
    for (&s, &a) in strata.iter().zip(arms) {
        counts[s][a as usize] += 1;
    }
    for (s, c) in counts.iter().enumerate() {
        for arm in 0..2u8 {
            if c[arm as usize] == 0 {
                return Err(Error::Positivity { stratum: levels[s].clone(), arm });
            }
        }
    }
    Ok(())
}

pub(crate) fn index_levels(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut levels: Vec<String> = labels.to_vec();
    levels.sort();
    levels.dedup();
    sort_levels(&mut levels);
    let lookup: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let idx = labels.iter().map(|l| lookup[l.as_str()]).collect();
    (levels, idx)
}

impl TrialDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        subjects: Vec<SubjectRecord>,
        horizon: u32,
        covariate_names: Vec<String>,
        stratum_levels: Vec<String>,
    ) -> Result<Self> {
        let ds = Self { subjects, horizon, covariate_names, stratum_levels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Schema("dataset has no subjects".into()));
        }
        if self.horizon < 1 {
            return Err(Error::Argument("horizon must be >= 1".into()));
        }
        let p = self.covariate_names.len();
        for (i, s) in self.subjects.iter().enumerate() {
            let line = i + 2;
            if s.x.len() != p {
                return Err(Error::Value {
                    line,
                    column: "covariates".into(),
                    message: format!("expected {p} covariates, found {}", s.x.len()),
                });
            }
            if let Some(j) = s.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Missing { line, column: self.covariate_names[j].clone() });
            }
            if s.a > 1 || s.delta > 1 {
                return Err(Error::Value { line, column: "arm/event".into(), message: "must be binary".into() });
            }
            if s.u < 1 || s.u > self.horizon {
                return Err(Error::Value {
                    line,
                    column: "time".into(),
                    message: format!("time {} outside 1..={}", s.u, self.horizon),
                });
            }
            if s.stratum >= self.stratum_levels.len() {
                return Err(Error::Value { line, column: "stratum".into(), message: "unknown stratum".into() });
            }
        }
        let strata: Vec<usize> = self.subjects.iter().map(|s| s.stratum).collect();
        let arms: Vec<u8> = self.subjects.iter().map(|s| s.a).collect();
        check_positivity(&strata, &arms, &self.stratum_levels)
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_levels.len()
    }

    pub fn stratum_label(&self, subject: usize) -> &str {
        &self.stratum_levels[self.subjects[subject].stratum]
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Subject counts per (stratum, arm).
    pub fn cell_counts(&self) -> Vec<[usize; 2]> {
        let mut counts = vec![[0usize; 2]; self.n_strata()];
        for s in &self.subjects {
            counts[s.stratum][s.a as usize] += 1;
        }
        counts
    }

    /// Pooled fraction of subjects in arm 1.
    pub fn treated_fraction(&self) -> f64 {
        self.subjects.iter().filter(|s| s.a == 1).count() as f64 / self.n() as f64
    }

    /// Returns a dataset restricted to (and reindexed by) `subjects`.
    pub fn subset(&self, subjects: &[usize]) -> TrialDataset {
        TrialDataset {
            subjects: subjects.iter().map(|&i| self.subjects[i].clone()).collect(),
            horizon: self.horizon,
            covariate_names: self.covariate_names.clone(),
            stratum_levels: self.stratum_levels.clone(),
        }
    }

    /// Writes the dataset back out under `schema`'s column names.
    pub fn to_csv(&self, schema: &SchemaConfig) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let id_col = schema.id.clone().unwrap_or_else(|| "id".into());
        let mut header = vec![id_col, schema.stratum.clone(), schema.arm.clone(), schema.time.clone(), schema.event.clone()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for s in &self.subjects {
            let mut rec = vec![
                s.id.clone(),
                self.stratum_levels[s.stratum].clone(),
                s.a.to_string(),
                s.u.to_string(),
                s.delta.to_string(),
            ];
            rec.extend(s.x.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Parses and validates a trial CSV.
///
/// Subjects observed beyond an overridden horizon are administratively
/// censored at the horizon.
pub fn parse_dataset(csv_bytes: &[u8], schema: &SchemaConfig) -> Result<TrialDataset> {
    let table = read_common(
        csv_bytes,
        schema.id.as_deref(),
        &schema.arm,
        &schema.stratum,
        &[schema.time.as_str(), schema.event.as_str()],
        schema.covariates.as_deref(),
    )?;
    let time_idx = column_index(&table.headers, &schema.time)?;
    let event_idx = column_index(&table.headers, &schema.event)?;

    let mut times = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let u = parse_time(row.record.get(time_idx).unwrap_or(""), row.line, &schema.time)?;
        let d = parse_binary(row.record.get(event_idx).unwrap_or(""), row.line, &schema.event)?;
        times.push((u, d));
    }
    let horizon = match schema.horizon {
        Some(0) => return Err(Error::Argument("horizon override must be >= 1".into())),
        Some(h) => h,
        None => times.iter().map(|t| t.0).max().unwrap_or(1),
    };
    let labels: Vec<String> = table.rows.iter().map(|r| r.stratum_label.clone()).collect();
    let (levels, strata) = index_levels(&labels);

    let subjects = table
        .rows
        .into_iter()
        .zip(times)
        .zip(strata)
        .map(|((row, (u, d)), stratum)| {
            let (u, delta) = if u > horizon { (horizon, 0) } else { (u, d) };
            SubjectRecord { id: row.id, x: row.x, stratum, a: row.a, u, delta }
        })
        .collect();
    TrialDataset::new(subjects, horizon, table.covariate_names, levels)
}

/// Expands subjects into at-risk person-period rows for `t = 1..=min(u, horizon)`.
pub fn expand_long(ds: &TrialDataset) -> Vec<PersonTimeRow> {
    let mut rows = Vec::with_capacity(ds.subjects.iter().map(|s| s.u as usize).sum());
    for (i, s) in ds.subjects.iter().enumerate() {
        let last = s.u.min(ds.horizon);
        for t in 1..=last {
            let final_row = t == s.u;
            rows.push(PersonTimeRow {
                subject: i,
                t,
                event: final_row && s.delta == 1,
                censor: final_row && s.delta == 0,
                a: s.a,
                stratum: s.stratum,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    /// Fold index of each subject, in dataset order.
    pub fold_of: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Subjects outside `fold`.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Assigns subjects to `n_folds` folds so that fold counts within every
/// (stratum, arm) cell differ by at most one.
pub fn assign_folds(ds: &TrialDataset, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 1 {
        return Err(Error::Argument("number of folds must be >= 1".into()));
    }
    let mut fold_of = vec![0usize; ds.n()];
    if n_folds > 1 {
        let mut rng = rng_for(seed, &[0xF01D]);
        let mut offset = 0usize;
        for stratum in 0..ds.n_strata() {
            for arm in 0..2u8 {
                let mut members: Vec<usize> = ds
                    .subjects
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.stratum == stratum && s.a == arm)
                    .map(|(i, _)| i)
                    .collect();
                if members.len() < n_folds {
                    log::warn!(
                        "cell (stratum {}, arm {arm}) has {} subjects for {n_folds} folds; some folds get none",
                        ds.stratum_levels[stratum],
                        members.len()
                    );
                }
                members.shuffle(&mut rng);
                for (j, &i) in members.iter().enumerate() {
                    fold_of[i] = (offset + j) % n_folds;
                }
                offset = (offset + members.len()) % n_folds;
            }
        }
    }
    Ok(FoldAssignment { n_folds, fold_of, seed })
}
