//! Command implementations. Each returns the artifacts it wrote, relative to
//! the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lirt_core::fitting::FitResult;
use lirt_core::inference::{invariance_report, InvarianceReport};
use lirt_core::measurement::{category_information, category_probs, item_expectation, item_information};
use lirt_core::posterior::{individual_trajectory, item_trajectory, marginal_trajectory, PosteriorSummary, TrajectoryRequest};
use lirt_core::simulate::simulate_dataset;
use lirt_core::fitting::fit_observed;
use lirt_core::optimizer::IterationRecord;
use lirt_core::{fit, ItemParams, LongDataset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CurveConfig, CurveItem, RunConfig};
use crate::csv_io::{fmt_f64, load_long_csv, write_json, write_long_csv, write_table};
use crate::error::{CliError, CliResult};
use crate::exec::RayonExecutor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Fit,
    Predict,
    Icc,
    Information,
    Invariance,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Icc => "icc",
            Command::Information => "information",
            Command::Invariance => "invariance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to regenerate a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    /// SHA-256 of the configuration file as read.
    pub config_sha256: String,
    /// The configuration after command-line overrides.
    pub effective_config: RunConfig,
    pub fit_seed: u64,
    pub n_qmc: usize,
    pub parameter_layout_version: u32,
    pub dependencies: Vec<(String, String)>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }
}

/// Runs `command` and writes its artifacts plus `manifest.json` under the
/// configured output directory.
pub fn run(command: Command, cfg: &RunConfig, config_bytes: &[u8], threads: usize) -> CliResult<PathBuf> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let exec = RayonExecutor::new(threads);
    let mut out = Outputs { dir: dir.clone(), written: Vec::new() };
    match command {
        Command::Simulate => simulate(cfg, &mut out)?,
        Command::Fit => {
            let result = fit_streaming(cfg, &exec, &mut out)?;
            write_fit(&result, &mut out)?;
        }
        Command::Predict => predict(cfg, &exec, &mut out)?,
        Command::Icc => icc(cfg, &exec, &mut out)?,
        Command::Information => information(cfg, &exec, &mut out)?,
        Command::Invariance => {
            let inv = cfg
                .invariance
                .as_ref()
                .ok_or_else(|| CliError::config("invariance", "required by this command"))?;
            let ds = load_data(cfg)?;
            let report = invariance_report(&ds, cfg.model()?, &cfg.fit, inv.mode, inv.global_test, &exec)?;
            write_json(&out.path("invariance.json"), &report)?;
            let text = invariance_text(&report);
            let p = out.path("invariance.txt");
            fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        }
    }

    let mut artifacts = Vec::new();
    for name in &out.written {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        artifacts.push(Artifact {
            file: name.clone(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        tool: "lirt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        config_sha256: sha256_hex(config_bytes),
        effective_config: cfg.clone(),
        fit_seed: cfg.fit.seed,
        n_qmc: cfg.fit.n_qmc,
        parameter_layout_version: lirt_core::parameters::LAYOUT_VERSION,
        dependencies: vec![("lirt-core".into(), env!("CARGO_PKG_VERSION").into())],
        artifacts,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> CliResult<LongDataset> {
    let src = cfg.data()?;
    let model = cfg.model()?;
    load_long_csv(&src.path, &src.columns, &model.items)
}

fn simulate(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::config("simulate", "required by this command"))?;
    let design = sim.resolve()?;
    let (ds, truth) = simulate_dataset(&design)?;
    write_long_csv(&ds, &out.path("data.csv"))?;
    write_json(&out.path("truth.json"), &truth)?;
    write_json(&out.path("design.json"), &design)?;
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_else(|| "NA".into())
}

/// Writes the fit JSON and natural-scale tables.
fn write_fit(result: &FitResult, out: &mut Outputs) -> CliResult<()> {
    write_json(&out.path("fit.json"), result)?;

    let max_thr = result.tables.items.iter().map(|r| r.thresholds.len()).max().unwrap_or(0);
    let mut header: Vec<String> = vec!["item_id".into(), "discrimination".into(), "discrimination_se".into()];
    for l in 1..=max_thr {
        header.push(format!("threshold_{l}"));
        header.push(format!("threshold_{l}_se"));
    }
    let rows: Vec<Vec<String>> = result
        .tables
        .items
        .iter()
        .map(|r| {
            let mut row = vec![r.item_id.clone(), fmt_f64(r.discrimination.estimate), opt(r.discrimination.se)];
            for l in 0..max_thr {
                match r.thresholds.get(l) {
                    Some(e) => {
                        row.push(fmt_f64(e.estimate));
                        row.push(opt(e.se));
                    }
                    None => row.extend(["NA".to_string(), "NA".to_string()]),
                }
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(&out.path("items.csv"), &header_refs, &rows)?;

    let rows: Vec<Vec<String>> = result
        .tables
        .fixed
        .iter()
        .map(|r| vec![r.name.clone(), fmt_f64(r.estimate), opt(r.se), opt(r.z), opt(r.p_value)])
        .collect();
    write_table(&out.path("fixed_effects.csv"), &["term", "estimate", "se", "z", "p_value"], &rows)?;

    let rows: Vec<Vec<String>> = result
        .tables
        .covariance
        .iter()
        .map(|r| vec![r.row.clone(), r.col.clone(), fmt_f64(r.estimate), opt(r.se)])
        .collect();
    write_table(&out.path("covariance.csv"), &["row", "col", "estimate", "se"], &rows)?;

    if !result.tables.contrasts.is_empty() {
        let rows: Vec<Vec<String>> = result
            .tables
            .contrasts
            .iter()
            .map(|r| {
                vec![
                    r.term.clone(),
                    r.item_id.clone(),
                    fmt_f64(r.estimate),
                    opt(r.se),
                    opt(r.z),
                    opt(r.p_value),
                    r.derived.to_string(),
                ]
            })
            .collect();
        write_table(
            &out.path("contrasts.csv"),
            &["term", "item_id", "estimate", "se", "z", "p_value", "derived"],
            &rows,
        )?;
    }

    Ok(())
}

const TRACE_HEADER: [&str; 8] = ["iteration", "loglik", "lambda", "param", "function", "rdm", "rejected_steps", "curvature"];

fn trace_row(r: &IterationRecord) -> [String; 8] {
    [
        r.iteration.to_string(),
        fmt_f64(r.loglik),
        fmt_f64(r.lambda),
        fmt_f64(r.param),
        fmt_f64(r.function),
        opt(r.rdm),
        r.rejected_steps.to_string(),
        if r.exact_hessian { "exact" } else { "score_outer_product" }.to_string(),
    ]
}

/// Fits the configured model, streaming the iteration trace to `trace.csv`.
fn fit_streaming(cfg: &RunConfig, exec: &RayonExecutor, out: &mut Outputs) -> CliResult<FitResult> {
    let ds = load_data(cfg)?;
    let path = out.path("trace.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Csv(e.to_string()))?;
    w.write_record(TRACE_HEADER)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let mut failure = None;
    let result = fit_observed(&ds, cfg.model()?, &cfg.fit, None, exec, &mut |r| {
        if failure.is_none() {
            failure = w.write_record(trace_row(r)).map_err(CliError::from).and_then(|_| w.flush().map_err(|e| CliError::io(&path, e))).err();
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

fn read_fit(path: &Path) -> CliResult<FitResult> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let fit: FitResult = serde_json::from_str(&text)?;
    if fit.layout_version != lirt_core::parameters::LAYOUT_VERSION {
        return Err(CliError::Json(format!(
            "{}: parameter layout version {} is not supported",
            path.display(),
            fit.layout_version
        )));
    }
    Ok(fit)
}

fn summary_rows(prefix: &[String], s: &PosteriorSummary, rows: &mut Vec<Vec<String>>) {
    for i in 0..s.grid.len() {
        let mut row = prefix.to_vec();
        row.extend([fmt_f64(s.grid[i]), fmt_f64(s.estimate[i]), fmt_f64(s.lower[i]), fmt_f64(s.upper[i])]);
        rows.push(row);
    }
}

fn predict(cfg: &RunConfig, exec: &RayonExecutor, out: &mut Outputs) -> CliResult<()> {
    let pc = cfg
        .predict
        .as_ref()
        .ok_or_else(|| CliError::config("predict", "required by this command"))?;
    let needs_data = pc.fit.is_none() || !pc.subjects.is_empty();
    let ds = if needs_data { Some(load_data(cfg)?) } else { None };
    let result = match &pc.fit {
        Some(p) => read_fit(p)?,
        None => {
            let r = fit(ds.as_ref().expect("loaded"), cfg.model()?, &cfg.fit, None, exec)?;
            write_fit(&r, out)?;
            r
        }
    };
    let grid = pc.grid.points();
    let request = |covariates| TrajectoryRequest {
        grid: grid.clone(),
        covariates,
        n_draws: pc.n_draws,
        level: pc.level,
        seed: pc.seed,
    };

    let mut rows = Vec::new();
    for profile in &pc.profiles {
        let s = marginal_trajectory(&result, &request(profile.covariates.clone()), exec)?;
        summary_rows(&[profile.label.clone()], &s, &mut rows);
    }
    write_table(
        &out.path("latent_trajectories.csv"),
        &["profile", "time", "estimate", "lower", "upper"],
        &rows,
    )?;

    let items: Vec<String> = match &pc.items {
        Some(v) => v.clone(),
        None => result.spec.items.iter().map(|i| i.item_id.clone()).collect(),
    };
    let mut rows = Vec::new();
    for profile in &pc.profiles {
        for item in &items {
            let s = item_trajectory(&result, item, &request(profile.covariates.clone()), pc.item_qmc, exec)?;
            summary_rows(&[profile.label.clone(), item.clone()], &s, &mut rows);
        }
    }
    write_table(
        &out.path("item_trajectories.csv"),
        &["profile", "item_id", "time", "estimate", "lower", "upper"],
        &rows,
    )?;

    if !pc.subjects.is_empty() {
        let ds = ds.as_ref().expect("loaded");
        let mut rows = Vec::new();
        for subject in &pc.subjects {
            let s = individual_trajectory(&result, ds, subject, &request(Default::default()), exec)?;
            summary_rows(&[subject.clone()], &s, &mut rows);
        }
        write_table(
            &out.path("individual_trajectories.csv"),
            &["subject", "time", "estimate", "lower", "upper"],
            &rows,
        )?;
    }
    Ok(())
}

/// Item parameters for curve commands: explicit list, saved fit, or a refit.
fn curve_items(cfg: &RunConfig, exec: &RayonExecutor) -> CliResult<(Vec<(String, ItemParams)>, CurveConfig)> {
    let cc = cfg.curves.clone().unwrap_or_default();
    let from_list = |items: &[CurveItem]| -> CliResult<Vec<(String, ItemParams)>> {
        items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                ItemParams::from_discrimination(it.discrimination, it.thresholds.clone())
                    .map(|p| (it.item_id.clone(), p))
                    .map_err(|e| CliError::config(format!("curves.items[{i}]"), e.to_string()))
            })
            .collect()
    };
    let items = match (&cc.items, &cc.fit) {
        (Some(items), _) => from_list(items)?,
        (None, Some(path)) => named_items(&read_fit(path)?),
        (None, None) => {
            let ds = load_data(cfg)?;
            named_items(&fit(&ds, cfg.model()?, &cfg.fit, None, exec)?)
        }
    };
    Ok((items, cc))
}

fn named_items(fit: &FitResult) -> Vec<(String, ItemParams)> {
    fit.spec
        .items
        .iter()
        .zip(&fit.natural.items)
        .map(|(d, p)| (d.item_id.clone(), p.clone()))
        .collect()
}

fn icc(cfg: &RunConfig, exec: &RayonExecutor, out: &mut Outputs) -> CliResult<()> {
    let (items, cc) = curve_items(cfg, exec)?;
    let grid = cc.lambda.points();
    let mut ccc = Vec::new();
    let mut expectation = Vec::new();
    for (id, item) in &items {
        for &lam in &grid {
            for (l, p) in category_probs(item, lam).into_iter().enumerate() {
                ccc.push(vec![id.clone(), fmt_f64(lam), l.to_string(), fmt_f64(p)]);
            }
            expectation.push(vec![id.clone(), fmt_f64(lam), fmt_f64(item_expectation(item, lam))]);
        }
    }
    write_table(&out.path("ccc.csv"), &["item_id", "lambda", "level", "probability"], &ccc)?;
    write_table(&out.path("expectation.csv"), &["item_id", "lambda", "expectation"], &expectation)
}

fn information(cfg: &RunConfig, exec: &RayonExecutor, out: &mut Outputs) -> CliResult<()> {
    let (items, cc) = curve_items(cfg, exec)?;
    let grid = cc.lambda.points();
    let mut per_level = Vec::new();
    let mut per_item = Vec::new();
    let mut total = vec![0.0; grid.len()];
    for (id, item) in &items {
        for (g, &lam) in grid.iter().enumerate() {
            for l in 0..item.n_levels() {
                let info = category_information(item, l, lam)?;
                per_level.push(vec![id.clone(), fmt_f64(lam), l.to_string(), fmt_f64(info)]);
            }
            let info = item_information(item, lam);
            total[g] += info;
            per_item.push(vec![id.clone(), fmt_f64(lam), fmt_f64(info)]);
        }
    }
    let totals: Vec<Vec<String>> = grid.iter().zip(&total).map(|(l, v)| vec![fmt_f64(*l), fmt_f64(*v)]).collect();
    write_table(
        &out.path("category_information.csv"),
        &["item_id", "lambda", "level", "information"],
        &per_level,
    )?;
    write_table(&out.path("item_information.csv"), &["item_id", "lambda", "information"], &per_item)?;
    write_table(&out.path("total_information.csv"), &["lambda", "information"], &totals)
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Plain-text rendering of an invariance report.
pub fn invariance_text(r: &InvarianceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Measurement invariance report ({:?})", r.mode);
    let _ = writeln!(
        s,
        "global {:?} test: statistic {:.4}, df {}, p {:.4}",
        r.global.kind, r.global.statistic, r.global.df, r.global.p_value
    );
    let _ = writeln!(s, "log-likelihood without contrasts {:.4}, with contrasts {:.4}", r.loglik_without, r.loglik_with);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<28} {:>12} {:>10} {:>12} {:>10}", "shared effect", "without", "se", "with", "se");
    for row in &r.structural {
        let _ = writeln!(
            s,
            "{:<28} {:>12.4} {:>10} {:>12.4} {:>10}",
            row.name,
            row.without_contrasts,
            cell(row.without_contrasts_se),
            row.with_contrasts,
            cell(row.with_contrasts_se)
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<20} {:<12} {:>10} {:>10} {:>10}", "contrast", "item", "estimate", "se", "p");
    for row in &r.contrasts {
        let flag = if row.derived { " *" } else { "" };
        let _ = writeln!(
            s,
            "{:<20} {:<12} {:>10.4} {:>10} {:>10}{flag}",
            row.term,
            row.item_id,
            row.estimate,
            cell(row.se),
            cell(row.p_value)
        );
    }
    let _ = writeln!(s, "* obtained as minus the sum of the other items' contrasts");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:>12} {:>4} {:>10}", "item", "wald", "df", "p");
    for t in &r.per_item {
        let _ = writeln!(
            s,
            "{:<12} {:>12.4} {:>4} {:>10.4}",
            t.item_id, t.test.statistic, t.test.df, t.test.p_value
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "note: {}", r.note);
    s
}
