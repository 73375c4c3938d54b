//! `strat-tte` command-line interface.
//!
//! Every command reads one JSON config, writes its outputs into files, and
//! records a metadata block (version, git describe, seed, config hash).
//! Exit codes: 0 success, 2 bad input or config, 3 estimation failure.

mod config;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use strat_tte::analysis::analyze;
use strat_tte::data::parse_dataset;
use strat_tte::mean_outcome::{parse_mean_dataset, run_mean_method};
use strat_tte::sim::run_study;

use config::{AnalysisConfig, MeanAnalysisConfig};
use output::{Metadata, ResultRow};

#[derive(Parser)]
#[command(name = "strat-tte", version, about = "Covariate-adjusted survival estimands for stratified trials")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "STRAT_TTE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate survival functionals on a trial dataset.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the average treatment effect of a scalar outcome.
    AnalyzeMean {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Monte Carlo study.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Summary CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Directory for tidy per-replication and per-metric CSVs.
        #[arg(long)]
        plots_dir: Option<PathBuf>,
    },
    /// Print the default config of a command as JSON.
    PrintDefaults {
        #[arg(value_enum)]
        command: DefaultsFor,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DefaultsFor {
    Analyze,
    AnalyzeMean,
    Simulate,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Input(anyhow::Error),
    Estimation(anyhow::Error),
}

impl Failure {
    fn from_core(e: strat_tte::Error, context: String) -> Self {
        let input = e.is_data_error() || matches!(e, strat_tte::Error::Argument(_) | strat_tte::Error::Io(_));
        let err = anyhow::Error::new(e).context(context);
        if input {
            Failure::Input(err)
        } else {
            Failure::Estimation(err)
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<(T, Vec<u8>)> {
    match path {
        None => Ok((T::default(), Vec::new())),
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            let cfg = serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", p.display()))?;
            Ok((cfg, bytes))
        }
    }
}

fn cmd_analyze(data: &Path, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let (cfg, _) = read_config::<AnalysisConfig>(config)?;
    let bytes = fs::read(data).with_context(|| format!("reading data {}", data.display()))?;
    let ds = parse_dataset(&bytes, &cfg.schema).map_err(|e| Failure::from_core(e, format!("loading {}", data.display())))?;
    let estimands = cfg.resolved_estimands(ds.horizon).map_err(|e| Failure::from_core(e, "estimand config".into()))?;
    log::info!("{} subjects, {} strata, horizon {}", ds.n(), ds.n_strata(), ds.horizon);

    let mut rows = Vec::new();
    let mut analyses = Vec::new();
    for m in &cfg.methods {
        let cell = format!("{} / {}", m.method.label(), m.model_label());
        let (fit, results) = analyze(&ds, m.method, &m.nuisance, &estimands, &cfg.tmle, cfg.design_p)
            .map_err(|e| Failure::from_core(e, format!("estimation failed in cell {cell}")))?;
        for (spec, r) in estimands.iter().zip(&results) {
            rows.push(ResultRow::new(m.method.label(), "Simple", m.model_label(), &spec.to_string(), r.estimate, &r.simple));
            rows.push(ResultRow::new(
                m.method.label(),
                "Stratified",
                m.model_label(),
                &spec.to_string(),
                r.estimate,
                &r.stratified,
            ));
        }
        analyses.push(serde_json::json!({
            "method": m.method.label(),
            "model": m.model_label(),
            "nuisance": m.nuisance,
            "fit": fit,
            "estimands": results,
        }));
    }
    let meta = Metadata::new(&cfg, cfg.seed());
    write_outputs(out, &rows, &meta, serde_json::json!({ "config": cfg, "analyses": analyses }))
}

fn cmd_analyze_mean(data: &Path, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let (cfg, _) = read_config::<MeanAnalysisConfig>(config)?;
    let bytes = fs::read(data).with_context(|| format!("reading data {}", data.display()))?;
    let ds = parse_mean_dataset(&bytes, &cfg.schema).map_err(|e| Failure::from_core(e, format!("loading {}", data.display())))?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for m in &cfg.methods {
        let r = run_mean_method(&ds, &m.method, cfg.design_p, cfg.alpha)
            .map_err(|e| Failure::from_core(e, format!("estimation failed in cell {}", m.label)))?;
        let model = config::mean_model_label(&m.method);
        rows.push(ResultRow::new(&m.label, "Simple", model, "ate", r.estimate, &r.simple));
        rows.push(ResultRow::new(&m.label, "Stratified", model, "ate", r.estimate, &r.stratified));
        results.push(serde_json::json!({ "label": m.label, "result": r }));
    }
    let meta = Metadata::new(&cfg, cfg.seed());
    write_outputs(out, &rows, &meta, serde_json::json!({ "config": cfg, "results": results }))
}

fn write_outputs(out: &Path, rows: &[ResultRow], meta: &Metadata, body: serde_json::Value) -> Result<(), Failure> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    output::write_results_csv(&out.join("results.csv"), rows)?;
    output::write_forest_plot_csv(&out.join("forest_plot.csv"), rows)?;
    let mut json = body;
    json["metadata"] = serde_json::to_value(meta).context("serializing metadata")?;
    output::write_json(&out.join("results.json"), &json)?;
    output::write_json(&out.join("metadata.json"), meta)?;
    for r in rows {
        println!("{}", r.display_line());
    }
    Ok(())
}

fn cmd_simulate(config: Option<&Path>, out: &Path, plots_dir: Option<&Path>) -> Result<(), Failure> {
    let (cfg, _) = read_config::<strat_tte::sim::StudyConfig>(config)?;
    let summary = run_study(&cfg).map_err(|e| Failure::from_core(e, "simulation study".into()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut buf = Vec::new();
    summary.write_summary_csv(&mut buf).map_err(|e| Failure::from_core(e, "writing summary".into()))?;
    fs::write(out, buf).with_context(|| format!("writing {}", out.display()))?;
    let meta = Metadata::new(&cfg, cfg.master_seed);
    let meta_path = out.with_extension("meta.json");
    output::write_json(&meta_path, &serde_json::json!({ "metadata": meta, "truth": summary.truth, "truth_se": summary.truth_se, "failures": summary.failures }))?;
    if let Some(dir) = plots_dir {
        output::write_plot_tables(dir, &summary)?;
    }
    println!("truth = {:.6} (MC se {:.2e})", summary.truth, summary.truth_se);
    for r in &summary.rows {
        println!(
            "n={:<5} {:<24} {:<10} bias={:+.4} sd={:.4} se={:.4} coverage={:.3} RE={:.3} strat/simple={:.3} reps={} failures={}",
            r.n,
            r.estimator,
            r.variance,
            r.bias,
            r.empirical_sd,
            r.mean_se,
            r.coverage,
            r.relative_efficiency,
            r.mean_strat_simple_ratio,
            r.reps,
            r.failures
        );
    }
    Ok(())
}

fn print_defaults(which: DefaultsFor) -> anyhow::Result<()> {
    let v = match which {
        DefaultsFor::Analyze => serde_json::to_value(AnalysisConfig::default())?,
        DefaultsFor::AnalyzeMean => serde_json::to_value(MeanAnalysisConfig::default())?,
        DefaultsFor::Simulate => serde_json::to_value(strat_tte::sim::StudyConfig::default())?,
    };
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: configuring thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Analyze { data, config, out } => cmd_analyze(data, config.as_deref(), out),
        Command::AnalyzeMean { data, config, out } => cmd_analyze_mean(data, config.as_deref(), out),
        Command::Simulate { config, out, plots_dir } => cmd_simulate(config.as_deref(), out, plots_dir.as_deref()),
        Command::PrintDefaults { command } => print_defaults(*command).map_err(Failure::Input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Estimation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
