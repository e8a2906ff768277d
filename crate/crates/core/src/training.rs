//! Mini-batch training with optional missing-view augmentation, class
//! weighting and early stopping on the full-view validation loss.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augmentation::{combinations, sensd_mask, tempd_in_place, AugKind, AugPolicy};
use crate::data::{MultiViewDataset, Targets};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::{Batch, Level, Model, PREDICT_CHUNK};
use crate::nn::Ctx;
use crate::optim::AdamState;
use crate::params::{ParamStore, Session};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::views::{MaskSet, ViewKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of the training data held out for early stopping.
    pub val_fraction: f64,
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-3,
            max_epochs: 100,
            patience: 5,
            val_fraction: 0.2,
            class_weighting: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("train.val_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss of one prediction: `-w_y·ln p_y` on class probabilities, or the
/// squared error.
pub fn per_sample_loss(target: f64, prediction: &[f64], class_weights: Option<&[f64]>) -> Result<f64> {
    if prediction.len() == 1 {
        return Ok((prediction[0] - target).powi(2));
    }
    let c = prediction.len();
    if target < 0.0 || target.fract() != 0.0 || target as usize >= c {
        return Err(Error::CategoryOutOfRange {
            index: target as i64,
            cardinality: c,
        });
    }
    let y = target as usize;
    let w = class_weights.map_or(1.0, |w| w[y]);
    Ok(-w * prediction[y].ln())
}

/// Weights proportional to inverse class frequency with mean 1.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::CategoryOutOfRange {
                index: y as i64,
                cardinality: classes,
            });
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class {c} has no samples")));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / classes as f64;
    Ok(inv.iter().map(|w| w / mean).collect())
}

/// Per-row losses (`n × 1`) of head outputs against `targets`.
pub fn loss_rows(s: &mut Session, outputs: Var, targets: &Targets, weights: Option<&[f64]>) -> Result<Var> {
    match targets {
        Targets::Classes { labels, classes } => {
            let uniform = vec![1.0; *classes];
            s.graph
                .softmax_cross_entropy(outputs, labels, weights.unwrap_or(&uniform))
        }
        Targets::Values(v) => {
            let y = s.constant(Tensor::matrix(v.len(), 1, v.clone())?);
            let diff = s.graph.sub(outputs, y)?;
            s.graph.mul(diff, diff)
        }
    }
}

/// Mean over `combos` of the batch-mean loss, encoding every view once.
/// Returns the total and the per-combo losses.
pub fn combo_loss(
    model: &Model,
    s: &mut Session,
    batch: &Batch,
    targets: &Targets,
    combos: &[MaskSet],
    weights: Option<&[f64]>,
    ctx: &mut Ctx,
) -> Result<(Var, Vec<Var>)> {
    if combos.is_empty() {
        return Err(Error::InvalidArgument("no view combinations".into()));
    }
    let union = combos.iter().fold(0u32, |acc, m| acc | m.bits());
    let mut per_combo = Vec::with_capacity(combos.len());
    match model.level() {
        Level::Feature => {
            let union = MaskSet::from_bits(union, model.views().len())?;
            let enc = model.encode(s, batch, union, ctx)?;
            for &mask in combos {
                let out = model.fuse_and_predict(s, &enc, mask, ctx)?;
                let rows = loss_rows(s, out, targets, weights)?;
                per_combo.push(s.graph.mean_all(rows)?);
            }
        }
        Level::Input => {
            for &mask in combos {
                let out = model.forward(s, batch, &vec![mask; batch.len()], ctx)?;
                let rows = loss_rows(s, out, targets, weights)?;
                per_combo.push(s.graph.mean_all(rows)?);
            }
        }
    }
    let mut total = per_combo[0];
    for &l in &per_combo[1..] {
        total = s.graph.add(total, l)?;
    }
    let total = s.graph.scale(total, 1.0 / combos.len() as f64)?;
    Ok((total, per_combo))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub combo_losses: Vec<f64>,
}

/// Training-time augmentation state for one run.
pub struct Augmenter {
    policy: AugPolicy,
    combos: Vec<MaskSet>,
}

impl Augmenter {
    pub fn new(policy: &AugPolicy, views: usize) -> Result<Self> {
        policy.validate()?;
        let combos = match policy.kind {
            AugKind::Com => combinations(views)?,
            _ => vec![MaskSet::full(views)],
        };
        Ok(Self {
            policy: policy.clone(),
            combos,
        })
    }

    pub fn combos(&self) -> &[MaskSet] {
        &self.combos
    }

    /// Raw batch rows with time-step dropping applied when configured.
    pub fn batch(&self, ds: &MultiViewDataset, rows: &[usize], ctx: &mut Ctx) -> Result<Batch> {
        let mut raw: Vec<Tensor> = (0..ds.views().len()).map(|v| ds.view(v).gather_rows(rows)).collect();
        if self.policy.kind == AugKind::Tempd {
            for (spec, x) in ds.views().iter().zip(raw.iter_mut()) {
                if spec.kind != ViewKind::Temporal {
                    continue;
                }
                let width = spec.raw_width();
                for row in x.data_mut().chunks_mut(width) {
                    tempd_in_place(row, spec.dims[0], self.policy.tempd_ratio, ctx.rng())?;
                }
            }
        }
        Batch::from_raw(ds.views(), &raw)
    }

    /// One gradient step on `batch`.
    pub fn step(
        &self,
        model: &mut Model,
        adam: &mut AdamState,
        batch: &Batch,
        targets: &Targets,
        weights: Option<&[f64]>,
        ctx: &mut Ctx,
    ) -> Result<StepOutcome> {
        let (grads, outcome) = {
            let mut s = Session::new(model.store());
            let (loss, combo) = if self.policy.kind == AugKind::Sensd {
                let m = model.views().len();
                let masks = (0..batch.len())
                    .map(|_| sensd_mask(m, ctx.rng()))
                    .collect::<Result<Vec<_>>>()?;
                let out = model.forward(&mut s, batch, &masks, ctx)?;
                let rows = loss_rows(&mut s, out, targets, weights)?;
                let l = s.graph.mean_all(rows)?;
                (l, vec![l])
            } else {
                combo_loss(model, &mut s, batch, targets, &self.combos, weights, ctx)?
            };
            let outcome = StepOutcome {
                loss: s.value(loss).data()[0],
                combo_losses: combo.iter().map(|&l| s.value(l).data()[0]).collect(),
            };
            (s.param_grads(loss)?, outcome)
        };
        adam.step(model.store_mut().values_mut(), &grads)?;
        Ok(outcome)
    }
}

/// Unweighted mean loss on `ds` for each mask in `combos`, in evaluation mode.
pub fn evaluate_losses(model: &Model, ds: &MultiViewDataset, combos: &[MaskSet]) -> Result<Vec<f64>> {
    let n = ds.len();
    let mut sums = vec![0.0; combos.len()];
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(PREDICT_CHUNK) {
        let batch = Batch::gather(ds, chunk)?;
        let targets = ds.targets().subset(chunk);
        let mut s = Session::new(model.store());
        let mut ctx = Ctx::eval();
        let (_, per) = combo_loss(model, &mut s, &batch, &targets, combos, None, &mut ctx)?;
        for (acc, l) in sums.iter_mut().zip(per) {
            *acc += s.value(l).data()[0] * chunk.len() as f64;
        }
    }
    Ok(sums.into_iter().map(|x| x / n as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to strictly improve.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Progress {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.waited = 0;
            Progress::Improved
        } else {
            self.waited += 1;
            if self.waited >= self.patience {
                Progress::Stop
            } else {
                Progress::Waiting
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboLoss {
    pub views: String,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub combo_val_losses: Vec<ComboLoss>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.epochs {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Trains `model` on `train`, early-stopping on `val`, and restores the
/// best parameters. Randomness comes from the `aug` stream of `seed`.
pub fn train(
    model: &mut Model,
    train: &MultiViewDataset,
    val: &MultiViewDataset,
    cfg: &TrainConfig,
    policy: &AugPolicy,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "{} training / {} validation samples",
            train.len(),
            val.len()
        )));
    }
    if train.masks().iter().any(|m| !m.is_full()) {
        return Err(Error::InvalidArgument("training data must be full-view".into()));
    }
    let aug = Augmenter::new(policy, model.views().len())?;
    let weights = match train.targets() {
        Targets::Classes { labels, classes } if cfg.class_weighting => Some(class_weights(labels, *classes)?),
        _ => None,
    };
    let full = [model.views().full_mask()];
    let mut adam = AdamState::new(cfg.lr);
    let mut ctx = Ctx::train(stream(seed, "aug"));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: ParamStore = model.store().clone();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(ctx.rng());
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = aug.batch(train, rows, &mut ctx)?;
            let targets = train.targets().subset(rows);
            let out = aug.step(model, &mut adam, &batch, &targets, weights.as_deref(), &mut ctx)?;
            total += out.loss * rows.len() as f64;
        }
        let val_loss = evaluate_losses(model, val, &full)?[0];
        let combo_val_losses = if aug.combos().len() > 1 {
            evaluate_losses(model, val, aug.combos())?
                .into_iter()
                .zip(aug.combos())
                .map(|(loss, &m)| ComboLoss {
                    views: model.views().label(m),
                    loss,
                })
                .collect()
        } else {
            vec![ComboLoss {
                views: model.views().label(full[0]),
                loss: val_loss,
            }]
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            combo_val_losses,
        });
        match stopper.observe(epoch, val_loss) {
            Progress::Improved => best = model.store().clone(),
            Progress::Waiting => {}
            Progress::Stop => break,
        }
    }
    model.store_mut().load_from(&best)?;
    log.best_epoch = stopper.best_epoch();
    Ok(log)
}
