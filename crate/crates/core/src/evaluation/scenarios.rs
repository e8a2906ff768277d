use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::views::MaskSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissingScenario {
    None,
    OnlyMissing { view: String },
    OnlyAvailable { view: String },
    Fraction { view: String, p: f64 },
}

impl MissingScenario {
    pub fn name(&self) -> &'static str {
        match self {
            MissingScenario::None => "none",
            MissingScenario::OnlyMissing { .. } => "only_missing",
            MissingScenario::OnlyAvailable { .. } => "only_available",
            MissingScenario::Fraction { .. } => "fraction",
        }
    }

    pub fn view(&self) -> &str {
        match self {
            MissingScenario::None => "",
            MissingScenario::OnlyMissing { view }
            | MissingScenario::OnlyAvailable { view }
            | MissingScenario::Fraction { view, .. } => view,
        }
    }

    /// Share of samples affected.
    pub fn fraction(&self) -> f64 {
        match self {
            MissingScenario::None => 0.0,
            MissingScenario::OnlyMissing { .. } | MissingScenario::OnlyAvailable { .. } => 1.0,
            MissingScenario::Fraction { p, .. } => *p,
        }
    }
}

/// Copy of a full-view dataset with per-sample masks for `scenario`.
///
/// The fraction scenario masks the first `⌊p·N⌋` samples of one random
/// permutation, so an rng in the same state yields nested subsets as `p`
/// grows.
pub fn simulate_missing<R: Rng + ?Sized>(
    ds: &MultiViewDataset,
    scenario: &MissingScenario,
    rng: &mut R,
) -> Result<MultiViewDataset> {
    if ds.masks().iter().any(|m| !m.is_full()) {
        return Err(Error::InvalidArgument("scenarios start from full-view data".into()));
    }
    let views = ds.views();
    let full = views.full_mask();
    let n = ds.len();
    let masks = match scenario {
        MissingScenario::None => vec![full; n],
        MissingScenario::OnlyMissing { view } => vec![full.without(views.index_of(view)?)?; n],
        MissingScenario::OnlyAvailable { view } => {
            vec![MaskSet::from_indices(&[views.index_of(view)?], views.len())?; n]
        }
        MissingScenario::Fraction { view, p } => {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidArgument(format!("fraction {p} outside [0, 1]")));
            }
            let reduced = full.without(views.index_of(view)?)?;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let count = (p * n as f64).floor() as usize;
            let mut masks = vec![full; n];
            for &i in &order[..count] {
                masks[i] = reduced;
            }
            masks
        }
    };
    ds.clone().with_masks(masks)
}
