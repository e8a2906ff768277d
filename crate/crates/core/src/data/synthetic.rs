//! Latent-factor generator with a cross-view redundancy knob.
//!
//! Each sample draws a shared factor `u ~ N(0, I_k)` and one private factor per
//! view. View `v` observes `A_v·(ρ·u + (1−ρ)·u_v) + σ·ε`; temporal views
//! spread the projection over a few low-order cosines in time, categorical
//! views report the argmax of the projection. Targets depend on `u` only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{MultiViewDataset, Targets, Task};
use crate::error::{Error, Result};
use crate::rng::{stream, substream};
use crate::tensor::Tensor;
use crate::views::{ViewKind, ViewSet, ViewSpec};

/// Cosine components mixed into each temporal channel.
const TEMPORAL_BASIS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticView {
    pub id: String,
    pub kind: ViewKind,
    pub dims: Vec<usize>,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Views sharing a loading seed share their loading matrix.
    #[serde(default)]
    pub loading_seed: Option<u64>,
}

fn default_noise() -> f64 {
    0.1
}

impl SyntheticView {
    pub fn new(spec: ViewSpec, noise: f64) -> Self {
        Self {
            id: spec.id,
            kind: spec.kind,
            dims: spec.dims,
            noise,
            loading_seed: None,
        }
    }

    pub fn spec(&self) -> ViewSpec {
        ViewSpec {
            id: self.id.clone(),
            kind: self.kind,
            dims: self.dims.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub latent_dim: usize,
    pub redundancy: f64,
    pub task: Task,
    pub classes: usize,
    pub views: Vec<SyntheticView>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            latent_dim: 8,
            redundancy: 0.8,
            task: Task::Classification,
            classes: 3,
            views: vec![
                SyntheticView::new(ViewSpec::temporal("optical", 12, 4), 0.3),
                SyntheticView::new(ViewSpec::temporal("radar", 12, 2), 0.5),
                SyntheticView::new(ViewSpec::fixed("weather", 5), 0.5),
            ],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("synthetic.samples must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("synthetic.latent_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return Err(Error::Config("synthetic.redundancy must be in [0, 1]".into()));
        }
        if self.task == Task::Classification && self.classes < 2 {
            return Err(Error::Config("synthetic.classes must be at least 2".into()));
        }
        if self.views.iter().any(|v| !(v.noise >= 0.0 && v.noise.is_finite())) {
            return Err(Error::Config(
                "synthetic view noise must be finite and non-negative".into(),
            ));
        }
        ViewSet::new(self.views.iter().map(SyntheticView::spec).collect())?;
        Ok(())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn project(a: &[f64], x: &[f64]) -> Vec<f64> {
    a.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
        .collect()
}

fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Deterministic in `(config, seed)`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<MultiViewDataset> {
    cfg.validate()?;
    let views = ViewSet::new(cfg.views.iter().map(SyntheticView::spec).collect())?;
    let k = cfg.latent_dim;
    let n = cfg.samples;
    let scale = 1.0 / (k as f64).sqrt();

    let loadings: Vec<Vec<f64>> = cfg
        .views
        .iter()
        .enumerate()
        .map(|(v, sv)| {
            let mut rng = match sv.loading_seed {
                Some(s) => substream(s, "loading", 0),
                None => substream(seed, "loading", v as u64 + 1),
            };
            let out = match sv.kind {
                ViewKind::Temporal => TEMPORAL_BASIS.min(sv.dims[0]) * sv.dims[1],
                _ => sv.dims[0],
            };
            gaussian_matrix(out, k, scale, &mut rng)
        })
        .collect();
    let mut target_rng = stream(seed, "target");
    let head = match cfg.task {
        Task::Classification => gaussian_matrix(cfg.classes, k, scale, &mut target_rng),
        Task::Regression => gaussian_matrix(1, k, scale, &mut target_rng),
    };

    let mut rng = stream(seed, "samples");
    let mut data: Vec<Vec<f64>> = views.iter().map(|s| Vec::with_capacity(n * s.raw_width())).collect();
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let rho = cfg.redundancy;
    for _ in 0..n {
        let u = gaussian_vec(k, &mut rng);
        for (v, sv) in cfg.views.iter().enumerate() {
            let private = gaussian_vec(k, &mut rng);
            let mixed: Vec<f64> = u.iter().zip(&private).map(|(a, b)| rho * a + (1.0 - rho) * b).collect();
            let proj = project(&loadings[v], &mixed);
            let out = &mut data[v];
            match sv.kind {
                ViewKind::Static => {
                    for p in proj {
                        out.push(p + sv.noise * rng.sample::<f64, _>(StandardNormal));
                    }
                }
                ViewKind::Categorical => {
                    let noisy: Vec<f64> = proj
                        .iter()
                        .map(|p| p + sv.noise * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    out.push(argmax(&noisy) as f64);
                }
                ViewKind::Temporal => {
                    let (steps, channels) = (sv.dims[0], sv.dims[1]);
                    let basis = TEMPORAL_BASIS.min(steps);
                    for t in 0..steps {
                        for c in 0..channels {
                            let signal: f64 = (0..basis)
                                .map(|j| {
                                    let phase = std::f64::consts::PI * j as f64 * (t as f64 + 0.5) / steps as f64;
                                    phase.cos() * proj[j * channels + c]
                                })
                                .sum();
                            out.push(signal + sv.noise * rng.sample::<f64, _>(StandardNormal));
                        }
                    }
                }
            }
        }
        let scores = project(&head, &u);
        match cfg.task {
            Task::Classification => labels.push(argmax(&scores)),
            Task::Regression => values.push(scores[0]),
        }
    }

    let tensors = views
        .iter()
        .zip(data)
        .map(|(spec, d)| Tensor::matrix(n, spec.raw_width(), d))
        .collect::<Result<Vec<_>>>()?;
    let targets = match cfg.task {
        Task::Classification => Targets::classes(labels, cfg.classes)?,
        Task::Regression => Targets::Values(values),
    };
    MultiViewDataset::new(views, tensors, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            samples: 50,
            views: vec![
                SyntheticView::new(ViewSpec::temporal("t", 6, 2), 0.1),
                SyntheticView::new(ViewSpec::fixed("s", 3), 0.1),
                SyntheticView::new(ViewSpec::categorical("c", 4), 0.1),
            ],
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = generate_synthetic(&small(), 3).unwrap();
        let b = generate_synthetic(&small(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.view(0).shape(), &[50, 12]);
        assert_eq!(a.view(1).shape(), &[50, 3]);
        assert_eq!(a.view(2).shape(), &[50, 1]);
        assert_ne!(a, generate_synthetic(&small(), 4).unwrap());
    }

    #[test]
    fn regression_targets() {
        let cfg = SyntheticConfig {
            task: Task::Regression,
            ..small()
        };
        let ds = generate_synthetic(&cfg, 0).unwrap();
        assert!(matches!(ds.targets(), Targets::Values(v) if v.len() == 50));
    }

    #[test]
    fn rejects_bad_redundancy() {
        let cfg = SyntheticConfig {
            redundancy: 1.5,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config(_))));
    }
}
