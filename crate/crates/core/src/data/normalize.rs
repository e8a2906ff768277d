//! Z-score normalization fitted on training rows. Temporal views share one
//! mean/std per channel across time steps; categorical views are left as is.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::MultiViewDataset;
use crate::error::{Error, Result};
use crate::views::{ViewKind, ViewSpec};

/// Standard deviations at or below this are treated as 1.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats {
    pub views: BTreeMap<String, ViewStats>,
}

fn feature_width(spec: &ViewSpec) -> Option<usize> {
    match spec.kind {
        ViewKind::Temporal => Some(spec.dims[1]),
        ViewKind::Static => Some(spec.dims[0]),
        ViewKind::Categorical => None,
    }
}

impl NormStats {
    /// Fits on the samples listed in `rows`.
    pub fn fit(ds: &MultiViewDataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::DegenerateSplit("no rows to fit normalization on".into()));
        }
        let mut views = BTreeMap::new();
        for (v, spec) in ds.views().iter().enumerate() {
            let Some(width) = feature_width(spec) else {
                continue;
            };
            let x = ds.view(v);
            let mut sum = vec![0.0; width];
            let mut count = 0usize;
            for &r in rows {
                for chunk in x.row_slice(r).chunks(width) {
                    for (s, val) in sum.iter_mut().zip(chunk) {
                        *s += val;
                    }
                    count += 1;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0; width];
            for &r in rows {
                for chunk in x.row_slice(r).chunks(width) {
                    for ((s, val), mu) in sq.iter_mut().zip(chunk).zip(&mean) {
                        *s += (val - mu) * (val - mu);
                    }
                }
            }
            let std = sq
                .iter()
                .map(|s| {
                    let sd = (s / count as f64).sqrt();
                    if sd > STD_FLOOR {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect();
            views.insert(spec.id.clone(), ViewStats { mean, std });
        }
        Ok(Self { views })
    }

    fn each<F: Fn(f64, f64, f64) -> f64>(&self, ds: &mut MultiViewDataset, f: F) -> Result<()> {
        for id in self.views.keys() {
            ds.views().index_of(id)?;
        }
        for v in 0..ds.views().len() {
            let spec = ds.views().get(v).clone();
            let (Some(width), Some(stats)) = (feature_width(&spec), self.views.get(&spec.id)) else {
                continue;
            };
            if stats.mean.len() != width || stats.std.len() != width {
                return Err(Error::shape(
                    "zscore",
                    format!(
                        "stats for `{}` have width {}, view has {width}",
                        spec.id,
                        stats.mean.len()
                    ),
                ));
            }
            for chunk in ds.view_mut(v).data_mut().chunks_mut(width) {
                for ((x, mu), sd) in chunk.iter_mut().zip(&stats.mean).zip(&stats.std) {
                    *x = f(*x, *mu, *sd);
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, ds: &mut MultiViewDataset) -> Result<()> {
        self.each(ds, |x, mu, sd| (x - mu) / sd)
    }

    pub fn invert(&self, ds: &mut MultiViewDataset) -> Result<()> {
        self.each(ds, |x, mu, sd| x * sd + mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Targets;
    use crate::tensor::Tensor;
    use crate::views::ViewSet;

    fn ds() -> MultiViewDataset {
        let views = ViewSet::new(vec![
            ViewSpec::fixed("s", 2),
            ViewSpec::temporal("t", 2, 1),
            ViewSpec::categorical("c", 3),
        ])
        .unwrap();
        let s = Tensor::matrix(3, 2, vec![1.0, 7.0, 2.0, 7.0, 6.0, 7.0]).unwrap();
        let t = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = Tensor::matrix(3, 1, vec![0.0, 2.0, 1.0]).unwrap();
        MultiViewDataset::new(views, vec![s, t, c], Targets::Values(vec![0.0; 3])).unwrap()
    }

    #[test]
    fn standardizes_training_rows() {
        let mut d = ds();
        let stats = NormStats::fit(&d, &[0, 1, 2]).unwrap();
        stats.apply(&mut d).unwrap();
        for v in 0..2 {
            let x = d.view(v);
            let width = if v == 0 { 2 } else { 1 };
            for c in 0..width {
                let col: Vec<f64> = x.data().iter().skip(c).step_by(width).copied().collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                assert!(mean.abs() < 1e-9);
            }
        }
        // constant column
        assert!(d.view(0).data().iter().skip(1).step_by(2).all(|&x| x == 0.0));
        assert_eq!(d.view(2).data(), &[0.0, 2.0, 1.0]);
        assert!(!stats.views.contains_key("c"));
    }

    #[test]
    fn round_trip() {
        let orig = ds();
        let mut d = orig.clone();
        let stats = NormStats::fit(&d, &[0, 2]).unwrap();
        stats.apply(&mut d).unwrap();
        stats.invert(&mut d).unwrap();
        for v in 0..3 {
            assert!(d.view(v).max_abs_diff(orig.view(v)) <= 1e-12);
        }
    }

    #[test]
    fn fit_uses_only_given_rows() {
        let d = ds();
        let a = NormStats::fit(&d, &[0, 1]).unwrap();
        let b = NormStats::fit(&d, &[1, 0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.views["t"].mean, vec![1.5]);
    }

    #[test]
    fn unknown_view_in_stats() {
        let mut d = ds();
        let mut stats = NormStats::fit(&d, &[0]).unwrap();
        stats.views.insert(
            "ghost".into(),
            ViewStats {
                mean: vec![0.0],
                std: vec![1.0],
            },
        );
        assert!(matches!(stats.apply(&mut d), Err(Error::UnknownView(v)) if v == "ghost"));
    }
}
