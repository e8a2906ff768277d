use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::views::{MaskSet, ViewKind, ViewSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    pub fn classes(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument("at least two classes required".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::CategoryOutOfRange {
                index: bad as i64,
                cardinality: classes,
            });
        }
        Ok(Targets::Classes { labels, classes })
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Classes { .. } => Task::Classification,
            Targets::Values(_) => Task::Regression,
        }
    }

    /// Width of the prediction head: class count or 1.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Classes { classes, .. } => *classes,
            Targets::Values(_) => 1,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Targets as `n × 1` column of reals (class index for classification).
    pub fn as_column(&self) -> Vec<f64> {
        match self {
            Targets::Classes { labels, .. } => labels.iter().map(|&y| y as f64).collect(),
            Targets::Values(v) => v.clone(),
        }
    }
}

/// Per-view arrays, one row per sample (`N × raw_width`), plus targets and
/// per-sample availability masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    views: ViewSet,
    data: Vec<Tensor>,
    targets: Targets,
    masks: Vec<MaskSet>,
}

impl MultiViewDataset {
    pub fn new(views: ViewSet, data: Vec<Tensor>, targets: Targets) -> Result<Self> {
        if data.len() != views.len() {
            return Err(Error::InvalidArgument(format!(
                "{} arrays for {} views",
                data.len(),
                views.len()
            )));
        }
        let n = targets.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset has no samples".into()));
        }
        for (spec, x) in views.iter().zip(&data) {
            if x.rows() != n {
                return Err(Error::RowCount {
                    view: spec.id.clone(),
                    expected: n,
                    found: x.rows(),
                });
            }
            if x.shape().len() != 2 || x.cols() != spec.raw_width() {
                return Err(Error::shape(
                    "dataset",
                    format!(
                        "view `{}` has shape {:?}, width {} expected",
                        spec.id,
                        x.shape(),
                        spec.raw_width()
                    ),
                ));
            }
            if spec.kind == ViewKind::Categorical {
                let card = spec.dims[0];
                if let Some(&bad) = x
                    .data()
                    .iter()
                    .find(|&&c| c < 0.0 || c.fract() != 0.0 || c as usize >= card)
                {
                    return Err(Error::CategoryOutOfRange {
                        index: bad as i64,
                        cardinality: card,
                    });
                }
            }
        }
        let masks = vec![views.full_mask(); n];
        Ok(Self {
            views,
            data,
            targets,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn views(&self) -> &ViewSet {
        &self.views
    }

    pub fn view(&self, v: usize) -> &Tensor {
        &self.data[v]
    }

    pub fn view_mut(&mut self, v: usize) -> &mut Tensor {
        &mut self.data[v]
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    pub fn masks(&self) -> &[MaskSet] {
        &self.masks
    }

    pub fn set_masks(&mut self, masks: Vec<MaskSet>) -> Result<()> {
        if masks.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} masks for {} samples",
                masks.len(),
                self.len()
            )));
        }
        if masks.iter().any(|m| m.num_views() != self.views.len()) {
            return Err(Error::InvalidArgument("mask view count differs from dataset".into()));
        }
        self.masks = masks;
        Ok(())
    }

    pub fn with_masks(mut self, masks: Vec<MaskSet>) -> Result<Self> {
        self.set_masks(masks)?;
        Ok(self)
    }

    /// Keeps only the listed views, in the given order, with full masks.
    pub fn select_views(&self, keep: &[usize]) -> Result<Self> {
        let views = ViewSet::new(keep.iter().map(|&v| self.views.get(v).clone()).collect())?;
        let data = keep.iter().map(|&v| self.data[v].clone()).collect();
        Self::new(views, data, self.targets.clone())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            views: self.views.clone(),
            data: self.data.iter().map(|x| x.gather_rows(idx)).collect(),
            targets: self.targets.subset(idx),
            masks: idx.iter().map(|&i| self.masks[i]).collect(),
        }
    }
}

/// Train/validation sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    /// Random split keeping `⌊val_fraction·n⌋` samples for validation.
    pub fn holdout<R: Rng + ?Sized>(n: usize, val_fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::DegenerateSplit(format!("validation fraction {val_fraction}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let n_val = (val_fraction * n as f64).floor() as usize;
        let split = Self {
            val: idx[..n_val].to_vec(),
            train: idx[n_val..].to_vec(),
        };
        split.check()?;
        Ok(split)
    }

    /// `k` folds over a random permutation; fold `i` validates on the `i`-th chunk.
    pub fn kfold<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Self>> {
        if k < 2 || k > n {
            return Err(Error::DegenerateSplit(format!("{k} folds over {n} samples")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        (0..k)
            .map(|f| {
                let (lo, hi) = (f * n / k, (f + 1) * n / k);
                let split = Self {
                    val: idx[lo..hi].to_vec(),
                    train: idx[..lo].iter().chain(&idx[hi..]).copied().collect(),
                };
                split.check()?;
                Ok(split)
            })
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::DegenerateSplit(format!(
                "{} training / {} validation samples",
                self.train.len(),
                self.val.len()
            )));
        }
        Ok(())
    }
}
