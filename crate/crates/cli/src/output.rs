//! Result tables, JSON dumps and run metadata.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use strat_tte::sim::McSummary;
use strat_tte::stats::Inference;

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub git_describe: &'static str,
    pub seed: u64,
    /// SHA-256 of the resolved config serialized as compact JSON.
    pub config_hash: String,
}

impl Metadata {
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Self {
        let bytes = serde_json::to_vec(config).unwrap_or_default();
        let hash = Sha256::digest(&bytes);
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            git_describe: env!("STRAT_TTE_GIT_DESCRIBE"),
            seed,
            config_hash: hash.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }
}

/// One line of the results table.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub method: String,
    pub randomization: String,
    pub model: String,
    pub estimand: String,
    pub estimate: f64,
    pub inference: Inference,
}

impl ResultRow {
    pub fn new(method: &str, randomization: &str, model: &str, estimand: &str, estimate: f64, inference: &Inference) -> Self {
        Self {
            method: method.into(),
            randomization: randomization.into(),
            model: model.into(),
            estimand: estimand.into(),
            estimate,
            inference: *inference,
        }
    }

    pub fn label(&self) -> String {
        format!("{} {} ({}, {})", self.method, self.model, self.randomization, self.estimand)
    }

    pub fn display_line(&self) -> String {
        format!(
            "{:<14} {:<10} {:<10} {:<8} {:>8.3} ({:.3}, {:.3}) p={:.3}",
            self.method,
            self.randomization,
            self.model,
            self.estimand,
            self.estimate,
            self.inference.ci_low,
            self.inference.ci_high,
            self.inference.p_value
        )
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["Method", "Randomization", "Model", "Estimate", "CI", "Variance", "p-value", "Estimand"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.randomization.clone(),
            r.model.clone(),
            format!("{:.3}", r.estimate),
            format!("({:.3}, {:.3})", r.inference.ci_low, r.inference.ci_high),
            format!("{:.3}", r.inference.variance),
            format!("{:.3}", r.inference.p_value),
            r.estimand.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_forest_plot_csv(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["label", "estimate", "ci_low", "ci_high"])?;
    for r in rows {
        w.write_record([
            r.label(),
            r.estimate.to_string(),
            r.inference.ci_low.to_string(),
            r.inference.ci_high.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value).context("serializing JSON")?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct MetricRow<'a> {
    n: usize,
    estimator: &'a str,
    variance: &'a str,
    value: f64,
}

/// Tidy tables for plotting: one file per metric plus the raw replications.
pub fn write_plot_tables(dir: &Path, summary: &McSummary) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut buf = Vec::new();
    summary.write_replications_csv(&mut buf)?;
    fs::write(dir.join("replications.csv"), buf).context("writing replications.csv")?;
    let metrics: [(&str, fn(&strat_tte::sim::SummaryRow) -> f64); 3] = [
        ("bias.csv", |r| r.bias),
        ("coverage.csv", |r| r.coverage),
        ("relative_efficiency.csv", |r| r.relative_efficiency),
    ];
    for (name, get) in metrics {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        for r in &summary.rows {
            w.serialize(MetricRow { n: r.n, estimator: &r.estimator, variance: &r.variance, value: get(r) })?;
        }
        w.flush()?;
    }
    Ok(())
}
