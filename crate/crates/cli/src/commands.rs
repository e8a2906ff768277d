use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mvl_core::augmentation::AugKind;
use mvl_core::config::ExperimentConfig;
use mvl_core::data::{write_dataset, MultiViewDataset, NormStats, Task};
use mvl_core::evaluation::{
    cross_validate, evaluate_model, fit, resolve_top_view, scenario_list, EvalConfig, EvalReport, ScenarioKind,
};
use mvl_core::gradcheck::{run_suite, TOLERANCE};
use mvl_core::model::{Level, Model, ModelSnapshot};
use mvl_core::Error;

use crate::failure::Failure;
use crate::Common;

type CmdResult = Result<(), Failure>;

/// Written by `train`, read back by `evaluate --model`.
#[derive(Serialize, Deserialize)]
struct TrainedModel {
    seed: u64,
    config: serde_json::Value,
    norm_stats: Option<NormStats>,
    model: ModelSnapshot,
}

/// Config resolution: defaults, then the file, then the seed flag.
fn resolve(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(Failure::config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path, Failure> {
    fs::create_dir_all(&c.out).map_err(Error::from)?;
    Ok(&c.out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

pub fn synth(c: &Common) -> CmdResult {
    let cfg = resolve(c)?;
    let ds = cfg.dataset()?;
    let manifest = write_dataset(&ds, out_dir(c)?, None)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn train(c: &Common) -> CmdResult {
    let cfg = resolve(c)?;
    let ds = cfg.dataset()?;
    let rows: Vec<usize> = (0..ds.len()).collect();
    let fitted = fit(&ds, &rows, &cfg.run_config(), cfg.seed)?;
    let out = out_dir(c)?;
    let artifact = TrainedModel {
        seed: cfg.seed,
        config: cfg.to_json()?,
        norm_stats: fitted.stats,
        model: fitted.model.snapshot(),
    };
    write_json(&out.join("model.json"), &artifact)?;
    let log = BufWriter::new(File::create(out.join("train_log.jsonl")).map_err(Error::from)?);
    fitted.log.write_jsonl(log)?;
    println!(
        "trained {} epochs, best epoch {}",
        fitted.log.epochs.len(),
        fitted.log.best_epoch
    );
    Ok(())
}

/// Scenarios of `eval` scored on a trained model over the whole dataset.
fn score_trained(
    cfg: &ExperimentConfig,
    eval: &EvalConfig,
    path: &Path,
    ds: &MultiViewDataset,
) -> Result<EvalReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let artifact: TrainedModel = serde_json::from_str(&text).map_err(Error::from)?;
    let model = Model::from_snapshot(&artifact.model)?;
    if model.views() != ds.views() {
        return Err(Error::Config(format!("model `{}` was trained on different views", path.display())).into());
    }
    let mut normalized = ds.clone();
    if let Some(stats) = &artifact.norm_stats {
        stats.apply(&mut normalized)?;
    }
    let rows: Vec<usize> = (0..ds.len()).collect();
    let top = resolve_top_view(ds, eval, &rows, &cfg.run_config(), cfg.seed)?;
    let scenarios = scenario_list(ds, eval, &top)?;
    Ok(evaluate_model(&model, &normalized, &scenarios, 0, cfg.seed)?)
}

fn report(cfg: &ExperimentConfig, eval: &EvalConfig, model: Option<&Path>) -> Result<EvalReport, Failure> {
    let ds = cfg.dataset()?;
    match model {
        Some(path) => score_trained(cfg, eval, path, &ds),
        None => Ok(cross_validate(&ds, &cfg.run_config(), eval, cfg.seed)?),
    }
}

fn write_report(c: &Common, cfg: &ExperimentConfig, report: &EvalReport, stem: &str) -> CmdResult {
    let out = out_dir(c)?;
    let csv = out.join(format!("{stem}.csv"));
    report.write_csv(&csv)?;
    report.write_summary(&out.join(summary_name(stem)), cfg.to_json()?, cfg.seed)?;
    println!("{}", csv.display());
    Ok(())
}

fn summary_name(stem: &str) -> PathBuf {
    match stem {
        "report" => PathBuf::from("summary.json"),
        s => PathBuf::from(format!("{s}_summary.json")),
    }
}

pub fn evaluate(c: &Common, model: Option<&Path>) -> CmdResult {
    let cfg = resolve(c)?;
    let report = report(&cfg, &cfg.eval, model)?;
    write_report(c, &cfg, &report, "report")
}

pub fn sweep(c: &Common, model: Option<&Path>) -> CmdResult {
    let cfg = resolve(c)?;
    let eval = EvalConfig {
        scenarios: vec![ScenarioKind::Fraction],
        ..cfg.eval.clone()
    };
    let report = report(&cfg, &eval, model)?;
    write_report(c, &cfg, &report, "sweep")
}

#[derive(Serialize)]
struct GradcheckRecord<'a> {
    seed: u64,
    seeds: usize,
    tolerance: f64,
    max_rel_error: f64,
    passed: bool,
    cases: &'a [mvl_core::gradcheck::CaseResult],
}

pub fn gradcheck(c: &Common, seeds: usize) -> CmdResult {
    let cfg = resolve(c)?;
    let list: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let report = run_suite(&list)?;
    let record = GradcheckRecord {
        seed: cfg.seed,
        seeds,
        tolerance: TOLERANCE,
        max_rel_error: report.max_rel_error(),
        passed: report.passed(),
        cases: &report.cases,
    };
    write_json(&out_dir(c)?.join("gradcheck.json"), &record)?;
    println!(
        "max relative error {:.3e} over {} checks",
        record.max_rel_error,
        report.cases.len()
    );
    if record.passed {
        return Ok(());
    }
    let worst = report
        .worst()
        .map(|w| format!("{} (seed {})", w.name, w.seed))
        .unwrap_or_default();
    Err(Failure::runtime(
        "gradcheck",
        format!(
            "max relative error {:.3e} exceeds {TOLERANCE:e}, worst {worst}",
            record.max_rel_error
        ),
    ))
}

#[derive(Debug, Serialize)]
struct AblationRow {
    aug: &'static str,
    level: &'static str,
    metric: &'static str,
    none: Option<f64>,
    only_missing: Option<f64>,
    only_available: Option<f64>,
}

#[derive(Serialize)]
struct AblationRecord<'a> {
    seed: u64,
    config: serde_json::Value,
    rows: &'a [AblationRow],
}

/// Mean of `metric` over every row of `scenario`, views and folds pooled.
fn pooled_mean(report: &EvalReport, scenario: &str, metric: &str) -> Option<f64> {
    let values: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.scenario == scenario && r.metric == metric)
        .map(|r| r.value)
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn ablate(c: &Common) -> CmdResult {
    let cfg = resolve(c)?;
    let ds = cfg.dataset()?;
    let metric = match ds.targets().task() {
        Task::Classification => "f1",
        Task::Regression => "r2",
    };
    let grid: Vec<(AugKind, Level)> = [AugKind::None, AugKind::Sensd, AugKind::Com]
        .into_iter()
        .flat_map(|a| [Level::Input, Level::Feature].map(|l| (a, l)))
        .collect();
    let rows = grid
        .par_iter()
        .map(|&(aug, level)| {
            let mut variant = cfg.clone();
            variant.aug.kind = aug;
            variant.aug.level = level;
            variant.validate().map_err(Failure::config)?;
            let report = cross_validate(&ds, &variant.run_config(), &variant.eval, variant.seed)?;
            Ok(AblationRow {
                aug: aug.as_str(),
                level: level.as_str(),
                metric,
                none: pooled_mean(&report, "none", metric),
                only_missing: pooled_mean(&report, "only_missing", metric),
                only_available: pooled_mean(&report, "only_available", metric),
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let out = out_dir(c)?;
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    for r in &rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    let record = AblationRecord {
        seed: cfg.seed,
        config: cfg.to_json()?,
        rows: &rows,
    };
    write_json(&out.join("ablation.json"), &record)?;
    println!("{}", path.display());
    Ok(())
}
