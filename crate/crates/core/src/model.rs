//! Predictors at input level (zero-imputed concatenation into one MLP
//! encoder) or feature level (per-view encoders, fusion, affine head).

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::{MultiViewDataset, Task};
use crate::encoders::{prepare_input, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::graph::Var;
use crate::nn::{Affine, Ctx};
use crate::params::{ParamStore, Session};
use crate::rng::stream;
use crate::tensor::{softmax, Tensor};
use crate::views::{MaskSet, ViewSet};

/// Rows per chunk when predicting on a whole dataset.
pub const PREDICT_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Input,
    Feature,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Input => "input",
            Level::Feature => "feature",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub level: Level,
    pub task: Task,
    /// Head width: class count, or 1 for regression.
    pub outputs: usize,
}

/// Per-view prepared inputs for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    inputs: Vec<Tensor>,
    size: usize,
}

impl Batch {
    /// `raw[v]` is `B × raw_width` for view `v`.
    pub fn from_raw(views: &ViewSet, raw: &[Tensor]) -> Result<Self> {
        let size = raw.first().map_or(0, Tensor::rows);
        let inputs = views
            .iter()
            .zip(raw)
            .map(|(spec, x)| prepare_input(spec, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, size })
    }

    pub fn gather(ds: &MultiViewDataset, rows: &[usize]) -> Result<Self> {
        let raw: Vec<Tensor> = (0..ds.views().len()).map(|v| ds.view(v).gather_rows(rows)).collect();
        Self::from_raw(ds.views(), &raw)
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn input(&self, v: usize) -> &Tensor {
        &self.inputs[v]
    }
}

/// Samples seen by encoders (summed over views) and by fusion + head.
#[derive(Debug, Default)]
pub struct CallCounters {
    encoder: AtomicUsize,
    head: AtomicUsize,
}

impl CallCounters {
    pub fn encoder_samples(&self) -> usize {
        self.encoder.load(Ordering::Relaxed)
    }

    pub fn head_samples(&self) -> usize {
        self.head.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.encoder.store(0, Ordering::Relaxed);
        self.head.store(0, Ordering::Relaxed);
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Feature {
        encoders: Vec<Encoder>,
        fusion: Fusion,
        head: Affine,
    },
    Input {
        encoder: Encoder,
        head: Affine,
    },
}

#[derive(Debug)]
pub struct Model {
    views: ViewSet,
    spec: ModelSpec,
    seed: u64,
    store: ParamStore,
    arch: Arch,
    counters: CallCounters,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub views: ViewSet,
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: ParamStore,
}

impl Model {
    /// Parameters are initialized from the `init` stream of `seed`.
    pub fn new(views: ViewSet, spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.encoder.validate()?;
        let d = spec.encoder.latent_dim;
        if spec.level == Level::Feature {
            spec.fusion.validate(d)?;
        }
        let mut rng = stream(seed, "init");
        let mut store = ParamStore::new();
        let arch = match spec.level {
            Level::Feature => {
                let encoders = views
                    .iter()
                    .map(|v| Encoder::for_view(&mut store, &format!("enc.{}", v.id), v, &spec.encoder, &mut rng))
                    .collect();
                let fusion = Fusion::new(&mut store, &spec.fusion, views.len(), d, &mut rng)?;
                let head = Affine::new(&mut store, "head", fusion.output_dim(), spec.outputs, &mut rng);
                Arch::Feature { encoders, fusion, head }
            }
            Level::Input => {
                let width = views.iter().map(|v| v.input_width()).sum();
                let encoder = Encoder::mlp(&mut store, "enc.input", width, &spec.encoder, &mut rng);
                let head = Affine::new(&mut store, "head", d, spec.outputs, &mut rng);
                Arch::Input { encoder, head }
            }
        };
        Ok(Self {
            views,
            spec,
            seed,
            store,
            arch,
            counters: CallCounters::default(),
        })
    }

    pub fn views(&self) -> &ViewSet {
        &self.views
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn level(&self) -> Level {
        self.spec.level
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn counters(&self) -> &CallCounters {
        &self.counters
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        match &self.arch {
            Arch::Feature { fusion, .. } => Some(fusion),
            Arch::Input { .. } => None,
        }
    }

    /// Encodes the views in `which` (feature level only); other slots are `None`.
    pub fn encode(&self, s: &mut Session, batch: &Batch, which: MaskSet, ctx: &mut Ctx) -> Result<Vec<Option<Var>>> {
        let Arch::Feature { encoders, .. } = &self.arch else {
            return Err(Error::InvalidArgument(
                "input-level models have no per-view encoders".into(),
            ));
        };
        (0..self.views.len())
            .map(|v| {
                if !which.contains(v) {
                    return Ok(None);
                }
                self.counters.encoder.fetch_add(batch.len(), Ordering::Relaxed);
                let x = s.constant(batch.input(v).clone());
                encoders[v].forward(s, x, ctx).map(Some)
            })
            .collect()
    }

    /// Fusion over the encodings of `mask` followed by the head.
    pub fn fuse_and_predict(
        &self,
        s: &mut Session,
        encodings: &[Option<Var>],
        mask: MaskSet,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let Arch::Feature { fusion, head, .. } = &self.arch else {
            return Err(Error::InvalidArgument("input-level models have no fusion".into()));
        };
        let order = fusion.order(&mask.indices(), ctx);
        let available = order
            .iter()
            .map(|&v| {
                encodings[v]
                    .map(|z| (v, z))
                    .ok_or_else(|| Error::InvalidArgument(format!("view {v} was not encoded")))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = s.value(available[0].1).rows();
        self.counters.head.fetch_add(rows, Ordering::Relaxed);
        let fused = fusion.forward_available(s, &available, ctx)?;
        head.forward(s, fused)
    }

    /// Head outputs (logits or values) with one availability mask per row.
    pub fn forward(&self, s: &mut Session, batch: &Batch, masks: &[MaskSet], ctx: &mut Ctx) -> Result<Var> {
        if masks.len() != batch.len() {
            return Err(Error::shape("model", "one mask per row required"));
        }
        if masks.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let uniform = masks.iter().all(|&m| m == masks[0]);
        match &self.arch {
            Arch::Feature { fusion, head, .. } => {
                if uniform {
                    let enc = self.encode(s, batch, masks[0], ctx)?;
                    return self.fuse_and_predict(s, &enc, masks[0], ctx);
                }
                let enc = self.encode(s, batch, self.views.full_mask(), ctx)?;
                let all: Vec<Var> = enc.into_iter().map(|z| z.expect("every view encoded")).collect();
                self.counters.head.fetch_add(batch.len(), Ordering::Relaxed);
                let fused = fusion.forward_masked(s, &all, masks, ctx)?;
                head.forward(s, fused)
            }
            Arch::Input { encoder, head } => {
                let x = self.imputed_input(s, batch, masks)?;
                self.counters.encoder.fetch_add(batch.len(), Ordering::Relaxed);
                self.counters.head.fetch_add(batch.len(), Ordering::Relaxed);
                let z = encoder.forward(s, x, ctx)?;
                head.forward(s, z)
            }
        }
    }

    /// Flattened concatenation of all views with missing ones zeroed per row.
    fn imputed_input(&self, s: &mut Session, batch: &Batch, masks: &[MaskSet]) -> Result<Var> {
        let b = batch.len();
        let parts = self
            .views
            .iter()
            .enumerate()
            .map(|(v, spec)| {
                let width = spec.input_width();
                let mut x = batch.input(v).reshaped(vec![b, width])?;
                for (r, m) in masks.iter().enumerate() {
                    if !m.contains(v) {
                        x.data_mut()[r * width..(r + 1) * width].fill(0.0);
                    }
                }
                Ok(s.constant(x))
            })
            .collect::<Result<Vec<_>>>()?;
        s.graph.concat_cols(&parts)
    }

    /// Evaluation-mode predictions for every sample of `ds` under its masks:
    /// class probabilities (`N × classes`) or values (`N × 1`).
    pub fn predict(&self, ds: &MultiViewDataset) -> Result<Tensor> {
        let n = ds.len();
        let mut out = Vec::with_capacity(n * self.spec.outputs);
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(PREDICT_CHUNK) {
            let batch = Batch::gather(ds, chunk)?;
            let masks: Vec<MaskSet> = chunk.iter().map(|&i| ds.masks()[i]).collect();
            let mut s = Session::new(&self.store);
            let y = self.forward(&mut s, &batch, &masks, &mut Ctx::eval())?;
            let y = s.value(y);
            match self.spec.task {
                Task::Classification => {
                    for r in 0..y.rows() {
                        out.extend(softmax(y.row_slice(r), None)?);
                    }
                }
                Task::Regression => out.extend_from_slice(y.data()),
            }
        }
        Tensor::matrix(n, self.spec.outputs, out)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            views: self.views.clone(),
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.store.clone(),
        }
    }

    pub fn from_snapshot(snap: &ModelSnapshot) -> Result<Self> {
        let mut model = Self::new(snap.views.clone(), snap.spec.clone(), snap.seed)?;
        model.store.load_from(&snap.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.snapshot())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let snap: ModelSnapshot = serde_json::from_str(&text)?;
        Self::from_snapshot(&snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig, SyntheticView};
    use crate::fusion::FusionKind;
    use crate::views::ViewSpec;

    fn dataset() -> MultiViewDataset {
        let cfg = SyntheticConfig {
            samples: 20,
            views: vec![
                SyntheticView::new(ViewSpec::temporal("t", 5, 2), 0.1),
                SyntheticView::new(ViewSpec::fixed("s", 3), 0.1),
                SyntheticView::new(ViewSpec::categorical("c", 3), 0.1),
            ],
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg, 1).unwrap()
    }

    fn spec(kind: FusionKind, level: Level) -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                latent_dim: 8,
                ..EncoderConfig::default()
            },
            fusion: FusionConfig {
                heads: 2,
                ..FusionConfig::with_kind(kind)
            },
            level,
            task: Task::Classification,
            outputs: 3,
        }
    }

    #[test]
    fn predictions_are_distributions() {
        let ds = dataset();
        for level in [Level::Input, Level::Feature] {
            let model = Model::new(ds.views().clone(), spec(FusionKind::Gated, level), 0).unwrap();
            let p = model.predict(&ds).unwrap();
            assert_eq!(p.shape(), &[20, 3]);
            for r in 0..20 {
                assert!((p.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_masks_match_per_row_uniform() {
        let ds = dataset();
        let model = Model::new(ds.views().clone(), spec(FusionKind::Memory, Level::Feature), 0).unwrap();
        let m = ds.views().len();
        let masks: Vec<MaskSet> = (0..ds.len())
            .map(|i| MaskSet::from_bits((i as u32 % 7) + 1, m).unwrap())
            .collect();
        let mixed = model.predict(&ds.clone().with_masks(masks.clone()).unwrap()).unwrap();
        for (i, &mask) in masks.iter().enumerate() {
            let single = ds.subset(&[i]);
            let p = model.predict(&single.with_masks(vec![mask]).unwrap()).unwrap();
            for (a, b) in p.data().iter().zip(mixed.row_slice(i)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let ds = dataset();
        let model = Model::new(ds.views().clone(), spec(FusionKind::Cross, Level::Feature), 5).unwrap();
        let json = serde_json::to_string(&model.snapshot()).unwrap();
        let back = Model::from_snapshot(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(model.predict(&ds).unwrap(), back.predict(&ds).unwrap());
    }

    #[test]
    fn input_level_zero_imputes() {
        let ds = dataset();
        let model = Model::new(ds.views().clone(), spec(FusionKind::Concat, Level::Input), 0).unwrap();
        let mask = MaskSet::from_indices(&[0, 2], 3).unwrap();
        let masked = model.predict(&ds.clone().with_masks(vec![mask; 20]).unwrap()).unwrap();
        let mut zeroed = ds.clone();
        zeroed.view_mut(1).data_mut().fill(0.0);
        assert_eq!(masked, model.predict(&zeroed).unwrap());
    }
}
