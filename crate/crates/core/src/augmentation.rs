//! Missing-view augmentation: all view combinations, whole-view dropping
//! and time-step dropping.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Level;
use crate::tensor::Tensor;
use crate::views::{MaskSet, ViewSet, MAX_VIEWS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    None,
    Com,
    Sensd,
    Tempd,
}

impl AugKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AugKind::None => "none",
            AugKind::Com => "com",
            AugKind::Sensd => "sensd",
            AugKind::Tempd => "tempd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub kind: AugKind,
    pub level: Level,
    pub tempd_ratio: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            kind: AugKind::None,
            level: Level::Feature,
            tempd_ratio: 0.3,
        }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tempd_ratio) {
            return Err(Error::Config("aug.tempd_ratio must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Every non-empty subset of `m` views: larger subsets first, then
/// lexicographic by member indices.
pub fn combinations(m: usize) -> Result<Vec<MaskSet>> {
    if m == 0 || m > MAX_VIEWS {
        return Err(Error::InvalidArgument(format!("cannot enumerate subsets of {m} views")));
    }
    let mut all: Vec<MaskSet> = (1u32..(1 << m))
        .map(|bits| MaskSet::from_bits(bits, m))
        .collect::<Result<_>>()?;
    all.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.indices().cmp(&b.indices())));
    Ok(all)
}

pub fn enumerate_combinations(views: &ViewSet) -> Result<Vec<MaskSet>> {
    combinations(views.len())
}

/// Drops each view with probability 1/2, redrawing until one survives.
pub fn sensd_mask<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<MaskSet> {
    if m == 0 || m > MAX_VIEWS {
        return Err(Error::InvalidArgument(format!("cannot draw a mask over {m} views")));
    }
    loop {
        let bits = (0..m).fold(0u32, |acc, v| if rng.random::<bool>() { acc | 1 << v } else { acc });
        if bits != 0 {
            return MaskSet::from_bits(bits, m);
        }
    }
}

/// Zeroes `⌊ratio·T⌋` distinct time steps of a row-major `T × c` series.
pub fn tempd_in_place<R: Rng + ?Sized>(series: &mut [f64], steps: usize, ratio: f64, rng: &mut R) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "time-step drop ratio {ratio} not in [0, 1)"
        )));
    }
    if steps == 0 || series.len() % steps != 0 {
        return Err(Error::shape(
            "tempd",
            format!("{} values over {steps} steps", series.len()),
        ));
    }
    let channels = series.len() / steps;
    let count = (ratio * steps as f64).floor() as usize;
    for t in sample(rng, steps, count) {
        series[t * channels..(t + 1) * channels].fill(0.0);
    }
    Ok(())
}

/// `series` is `T × c`; returns a copy with dropped steps zeroed.
pub fn tempd_mask<R: Rng + ?Sized>(series: &Tensor, ratio: f64, rng: &mut R) -> Result<Tensor> {
    let mut out = series.clone();
    let steps = series.rows();
    tempd_in_place(out.data_mut(), steps, ratio, rng)?;
    Ok(out)
}
