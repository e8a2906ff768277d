use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{argmax_rows, auc_pr, class_change_ratio, deformation, f1_macro, mape, prs, r2};
use super::report::{EvalReport, ReportRow};
use super::scenarios::{simulate_missing, MissingScenario};
use crate::augmentation::{AugKind, AugPolicy};
use crate::data::{MultiViewDataset, NormStats, Split, Targets};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{Model, ModelSpec};
use crate::rng::{stream, stream_seed, substream};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    None,
    OnlyMissing,
    OnlyAvailable,
    Fraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub repeats: usize,
    pub scenarios: Vec<ScenarioKind>,
    /// Views used by the single-view scenarios; all views when absent.
    pub views: Option<Vec<String>>,
    /// View removed in fraction sweeps; the best single-view model's view when absent.
    pub top_view: Option<String>,
    pub fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 1,
            scenarios: vec![
                ScenarioKind::None,
                ScenarioKind::OnlyMissing,
                ScenarioKind::OnlyAvailable,
            ],
            views: None,
            top_view: None,
            fractions: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("eval.folds must be at least 2".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("eval.repeats must be at least 1".into()));
        }
        if self.fractions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("eval.fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything needed to fit one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub aug: AugPolicy,
    pub train: TrainConfig,
    pub normalize: bool,
}

impl RunConfig {
    pub fn model_spec(&self, targets: &Targets) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            level: self.aug.level,
            task: targets.task(),
            outputs: targets.output_dim(),
        }
    }
}

pub struct Fitted {
    pub model: Model,
    pub stats: Option<NormStats>,
    pub log: TrainLog,
    /// `ds` normalized with `stats`.
    pub normalized: MultiViewDataset,
}

/// Fits on `rows` of `ds`, holding out part of them for early stopping.
/// Normalization statistics come from `rows` only.
pub fn fit(ds: &MultiViewDataset, rows: &[usize], run: &RunConfig, seed: u64) -> Result<Fitted> {
    let mut normalized = ds.clone();
    let stats = if run.normalize {
        let stats = NormStats::fit(ds, rows)?;
        stats.apply(&mut normalized)?;
        Some(stats)
    } else {
        None
    };
    let inner = Split::holdout(rows.len(), run.train.val_fraction, &mut stream(seed, "split"))?;
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| rows[i]).collect() };
    let train_ds = normalized.subset(&pick(&inner.train));
    let val_ds = normalized.subset(&pick(&inner.val));
    let mut model = Model::new(ds.views().clone(), run.model_spec(ds.targets()), seed)?;
    let log = train(&mut model, &train_ds, &val_ds, &run.train, &run.aug, seed)?;
    Ok(Fitted {
        model,
        stats,
        log,
        normalized,
    })
}

/// Metrics of `pred` against targets plus shift scores against `full`.
/// Metrics undefined on this data are left out.
pub fn score(targets: &Targets, full: &Tensor, pred: &Tensor) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, value: Result<f64>| match value {
        Ok(v) => Ok(out.push((name, v))),
        Err(Error::Metric(_)) => Ok(()),
        Err(e) => Err(e),
    };
    match targets {
        Targets::Classes { labels, classes } => {
            let one_hot: Vec<f64> = labels
                .iter()
                .flat_map(|&y| (0..*classes).map(move |c| f64::from(c == y)))
                .collect();
            push("f1", f1_macro(labels, &argmax_rows(pred), *classes))?;
            push("auc_pr", auc_pr(labels, pred))?;
            push("prs", prs(&one_hot, pred.data(), full.data()))?;
            push("class_change", class_change_ratio(full, pred))?;
            push("deformation", deformation(full.data(), pred.data()))?;
        }
        Targets::Values(y) => {
            push("r2", r2(y, pred.data()))?;
            push("mape", mape(y, pred.data()))?;
            push("prs", prs(y, pred.data(), full.data()))?;
            push("deformation", deformation(full.data(), pred.data()))?;
        }
    }
    Ok(out)
}

/// Scores `model` under each scenario on full-view data `ds`. Each scenario
/// draws from a fresh `eval` stream, so fraction scenarios are nested.
pub fn evaluate_model(
    model: &Model,
    ds: &MultiViewDataset,
    scenarios: &[MissingScenario],
    fold: usize,
    seed: u64,
) -> Result<EvalReport> {
    let full = model.predict(ds)?;
    let per_scenario = scenarios
        .par_iter()
        .map(|sc| {
            let masked = simulate_missing(ds, sc, &mut stream(seed, "eval"))?;
            let pred = model.predict(&masked)?;
            Ok(score(ds.targets(), &full, &pred)?
                .into_iter()
                .map(|(metric, value)| ReportRow {
                    scenario: sc.name().to_string(),
                    view: sc.view().to_string(),
                    p: sc.fraction(),
                    metric: metric.to_string(),
                    fold,
                    seed,
                    value,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        rows: per_scenario.into_iter().flatten().collect(),
    })
}

/// Fraction sweep removing `view` from a growing share of samples.
pub fn sweep(
    model: &Model,
    ds: &MultiViewDataset,
    view: &str,
    grid: &[f64],
    fold: usize,
    seed: u64,
) -> Result<EvalReport> {
    let scenarios: Vec<MissingScenario> = grid
        .iter()
        .map(|&p| MissingScenario::Fraction {
            view: view.to_string(),
            p,
        })
        .collect();
    evaluate_model(model, ds, &scenarios, fold, seed)
}

fn primary_metric(targets: &Targets, pred: &Tensor) -> Result<f64> {
    match targets {
        Targets::Classes { labels, classes } => f1_macro(labels, &argmax_rows(pred), *classes),
        Targets::Values(y) => r2(y, pred.data()),
    }
}

/// Views ordered best first by the validation score of a model trained on
/// that view alone (F1 or R2 on `val_rows`).
pub fn rank_views(
    ds: &MultiViewDataset,
    train_rows: &[usize],
    val_rows: &[usize],
    run: &RunConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let single = RunConfig {
        aug: AugPolicy {
            kind: AugKind::None,
            ..run.aug.clone()
        },
        ..run.clone()
    };
    let scores = (0..ds.views().len())
        .into_par_iter()
        .map(|v| {
            let view_ds = ds.select_views(&[v])?;
            let fitted = fit(&view_ds, train_rows, &single, stream_seed(seed, &format!("rank{v}")))?;
            let val = fitted.normalized.subset(val_rows);
            primary_metric(val.targets(), &fitted.model.predict(&val)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// View removed by fraction scenarios: the configured one, else the best
/// single-view model's view ranked on an inner holdout of `rows`. Empty when
/// no fraction scenario applies.
pub fn resolve_top_view(
    ds: &MultiViewDataset,
    eval: &EvalConfig,
    rows: &[usize],
    run: &RunConfig,
    seed: u64,
) -> Result<String> {
    if let Some(v) = &eval.top_view {
        ds.views().index_of(v)?;
        return Ok(v.clone());
    }
    if !eval.scenarios.contains(&ScenarioKind::Fraction) || ds.views().len() < 2 {
        return Ok(String::new());
    }
    let inner = Split::holdout(rows.len(), run.train.val_fraction, &mut stream(seed, "rank"))?;
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| rows[i]).collect() };
    let best = rank_views(ds, &pick(&inner.train), &pick(&inner.val), run, seed)?[0];
    Ok(ds.views().get(best).id.clone())
}

/// Concrete scenarios of `eval` on `ds`; single-view scenarios expand over
/// the selected views, fraction scenarios over the grid on `top_view`.
pub fn scenario_list(ds: &MultiViewDataset, eval: &EvalConfig, top_view: &str) -> Result<Vec<MissingScenario>> {
    let views: Vec<String> = match &eval.views {
        Some(v) => v.clone(),
        None => ds.views().iter().map(|s| s.id.clone()).collect(),
    };
    for v in &views {
        ds.views().index_of(v)?;
    }
    let mut out = Vec::new();
    for kind in &eval.scenarios {
        match kind {
            ScenarioKind::None => out.push(MissingScenario::None),
            ScenarioKind::OnlyMissing if ds.views().len() > 1 => {
                out.extend(views.iter().map(|v| MissingScenario::OnlyMissing { view: v.clone() }))
            }
            ScenarioKind::OnlyMissing => {}
            ScenarioKind::OnlyAvailable => {
                out.extend(views.iter().map(|v| MissingScenario::OnlyAvailable { view: v.clone() }))
            }
            ScenarioKind::Fraction if ds.views().len() > 1 => {
                out.extend(eval.fractions.iter().map(|&p| MissingScenario::Fraction {
                    view: top_view.to_string(),
                    p,
                }))
            }
            ScenarioKind::Fraction => {}
        }
    }
    Ok(out)
}

/// Repeated k-fold cross-validation: fit on each training part, evaluate
/// every configured scenario on the held-out fold. Folds run in parallel;
/// rows come back in fold order.
pub fn cross_validate(ds: &MultiViewDataset, run: &RunConfig, eval: &EvalConfig, seed: u64) -> Result<EvalReport> {
    eval.validate()?;
    let mut jobs = Vec::new();
    for r in 0..eval.repeats {
        let folds = Split::kfold(ds.len(), eval.folds, &mut substream(seed, "folds", r as u64))?;
        for (f, split) in folds.into_iter().enumerate() {
            jobs.push((r * eval.folds + f, split));
        }
    }
    let reports = jobs
        .par_iter()
        .map(|(fold, split)| {
            let fold_seed = stream_seed(seed, &format!("fold{fold}"));
            let fitted = fit(ds, &split.train, run, fold_seed)?;
            let top = resolve_top_view(ds, eval, &split.train, run, fold_seed)?;
            let scenarios = scenario_list(ds, eval, &top)?;
            let val = fitted.normalized.subset(&split.val);
            evaluate_model(&fitted.model, &val, &scenarios, *fold, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = EvalReport::default();
    for r in reports {
        out.extend(r);
    }
    Ok(out)
}
