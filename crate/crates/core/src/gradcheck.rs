//! Central finite-difference checks of reverse-mode gradients for every
//! layer and fusion function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::encoders::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::fusion::{Fusion, FusionConfig, FusionKind};
use crate::graph::Var;
use crate::nn::{Affine, Conv1d, Ctx, LayerNorm, LstmCell, MultiHeadAttention};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::views::{MaskSet, ViewSpec};

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const DENOM_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradReport {
    pub cases: Vec<CaseResult>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.max_rel_error() < TOLERANCE
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Scalar probe `Σ out ⊙ R` with a fixed random `R`, so every output entry
/// carries a distinct weight.
fn probe(s: &mut Session, out: Var) -> Result<Var> {
    let shape = s.value(out).shape().to_vec();
    let r = Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(0x5eed));
    let r = s.constant(r);
    let weighted = s.graph.mul(out, r)?;
    s.graph.sum_all(weighted)
}

/// Compares analytic and numeric gradients of `f` w.r.t. every scalar in
/// `store`; returns the coordinate count and the worst relative error.
pub fn check<F>(store: &mut ParamStore, f: F) -> Result<(usize, f64)>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut s = Session::new(store);
        let out = f(&mut s)?;
        let loss = probe(&mut s, out)?;
        Ok(s.value(loss).data()[0])
    };
    let analytic = {
        let mut s = Session::new(store);
        let out = f(&mut s)?;
        let loss = probe(&mut s, out)?;
        s.param_grads(loss)?
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    for (p, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = store.values()[p].data()[j];
            store.values_mut()[p].data_mut()[j] = orig + STEP;
            let up = eval(store)?;
            store.values_mut()[p].data_mut()[j] = orig - STEP;
            let down = eval(store)?;
            store.values_mut()[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            count += 1;
        }
    }
    Ok((count, worst))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.values_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::uniform(&shape, 1.0, rng);
    }
}

fn input(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, Tensor::uniform(&[rows, cols], 1.0, rng))
}

/// Dropout masks identical on every evaluation.
fn fixed_train_ctx(seed: u64) -> Ctx {
    Ctx::train(substream(seed, "gradcheck-dropout", 0))
}

const BATCH: usize = 2;
const DIM: usize = 4;
const VIEWS: usize = 3;

fn mixed_masks() -> Vec<MaskSet> {
    vec![
        MaskSet::from_indices(&[0, 2], VIEWS).expect("valid mask"),
        MaskSet::from_indices(&[1], VIEWS).expect("valid mask"),
    ]
}

fn case<F>(name: &'static str, seed: u64, build: F) -> Result<CaseResult>
where
    F: FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<Box<dyn Fn(&mut Session) -> Result<Var>>>,
{
    let mut rng = substream(seed, name, 0);
    let mut store = ParamStore::new();
    let f = build(&mut store, &mut rng)?;
    randomize(&mut store, &mut rng);
    let (coordinates, max_rel_error) = check(&mut store, f)?;
    Ok(CaseResult {
        name,
        seed,
        coordinates,
        max_rel_error,
    })
}

fn fusion_case(name: &'static str, kind: FusionKind, seed: u64) -> Result<CaseResult> {
    case(name, seed, |store, rng| {
        let cfg = FusionConfig {
            heads: 2,
            dropout: 0.3,
            ..FusionConfig::with_kind(kind)
        };
        let fusion = Fusion::new(store, &cfg, VIEWS, DIM, rng)?;
        let xs: Vec<ParamId> = (0..VIEWS)
            .map(|v| input(store, &format!("z{v}"), BATCH, DIM, rng))
            .collect();
        Ok(Box::new(move |s: &mut Session| {
            let all: Vec<Var> = xs.iter().map(|&x| s.param(x)).collect();
            fusion.forward_masked(s, &all, &mixed_masks(), &mut fixed_train_ctx(seed))
        }))
    })
}

/// Every check for one seed.
pub fn run_seed(seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = vec![
        case("mlp", seed, |store, rng| {
            let a = Affine::new(store, "a", 3, 5, rng);
            let b = Affine::new(store, "b", 5, 2, rng);
            let x = input(store, "x", BATCH, 3, rng);
            Ok(Box::new(move |s: &mut Session| {
                let x = s.param(x);
                let h = a.forward(s, x)?;
                let h = s.graph.relu(h)?;
                let h = b.forward(s, h)?;
                let t = s.graph.tanh(h)?;
                s.graph.sigmoid(t)
            }))
        })?,
        case("conv1d", seed, |store, rng| {
            let conv = Conv1d::new(store, "c", 2, 3, 3, rng);
            let x = input(store, "x", BATCH * 5, 2, rng);
            Ok(Box::new(move |s: &mut Session| {
                let x = s.param(x);
                let y = conv.forward(s, x, 5)?;
                s.graph.mean_pool_groups(y, 5)
            }))
        })?,
        case("layer_norm", seed, |store, rng| {
            let ln = LayerNorm::new(store, "ln", 5);
            let x = input(store, "x", BATCH, 5, rng);
            Ok(Box::new(move |s: &mut Session| {
                let x = s.param(x);
                ln.forward(s, x)
            }))
        })?,
        case("lstm", seed, |store, rng| {
            let cell = LstmCell::new(store, "cell", 3, 2, rng);
            let xs = [input(store, "x0", BATCH, 3, rng), input(store, "x1", BATCH, 3, rng)];
            Ok(Box::new(move |s: &mut Session| {
                let mut h = s.constant(Tensor::zeros(&[BATCH, 2]));
                let mut c = h;
                for &x in &xs {
                    let x = s.param(x);
                    (h, c) = cell.step(s, x, h, c)?;
                }
                s.graph.concat_cols(&[h, c])
            }))
        })?,
        case("attention", seed, |store, rng| {
            let mha = MultiHeadAttention::new(store, "mha", DIM, 2, 4, true, rng)?;
            let x = input(store, "x", BATCH * 3, DIM, rng);
            // second sequence drops its last key
            let excluded: Vec<bool> = (0..BATCH * 2 * 3)
                .flat_map(|row| (0..3).map(move |j| row >= 2 * 3 && j == 2))
                .collect();
            Ok(Box::new(move |s: &mut Session| {
                let x = s.param(x);
                let att = mha.forward(
                    s,
                    x,
                    BATCH,
                    &[0, 1, 3],
                    Some(&excluded),
                    0.3,
                    &mut fixed_train_ctx(seed),
                )?;
                Ok(att.out)
            }))
        })?,
        case("masked_softmax", seed, |store, rng| {
            let x = input(store, "x", 3, 4, rng);
            let excluded = vec![
                false, true, false, false, //
                true, true, false, true, //
                false, false, false, false,
            ];
            Ok(Box::new(move |s: &mut Session| {
                let x = s.param(x);
                s.graph.softmax_rows(x, Some(&excluded))
            }))
        })?,
        case("cross_entropy", seed, |store, rng| {
            let x = input(store, "logits", 3, 4, rng);
            Ok(Box::new(move |s: &mut Session| {
                let x = s.param(x);
                s.graph.softmax_cross_entropy(x, &[0, 3, 1], &[0.5, 1.0, 1.5, 2.0])
            }))
        })?,
        case("temporal_encoder", seed, |store, rng| {
            let cfg = EncoderConfig {
                latent_dim: DIM,
                dropout: 0.3,
                ..EncoderConfig::default()
            };
            let enc = Encoder::for_view(store, "enc", &ViewSpec::temporal("t", 4, 2), &cfg, rng);
            let x = input(store, "x", BATCH * 4, 2, rng);
            Ok(Box::new(move |s: &mut Session| {
                let x = s.param(x);
                enc.forward(s, x, &mut fixed_train_ctx(seed))
            }))
        })?,
        case("static_encoder", seed, |store, rng| {
            let cfg = EncoderConfig {
                latent_dim: DIM,
                dropout: 0.3,
                ..EncoderConfig::default()
            };
            let enc = Encoder::for_view(store, "enc", &ViewSpec::fixed("s", 3), &cfg, rng);
            let x = input(store, "x", BATCH, 3, rng);
            Ok(Box::new(move |s: &mut Session| {
                let x = s.param(x);
                enc.forward(s, x, &mut fixed_train_ctx(seed))
            }))
        })?,
    ];
    for (name, kind) in [
        ("fusion_average", FusionKind::Average),
        ("fusion_gated", FusionKind::Gated),
        ("fusion_cross", FusionKind::Cross),
        ("fusion_memory", FusionKind::Memory),
        ("fusion_concat", FusionKind::Concat),
    ] {
        out.push(fusion_case(name, kind, seed)?);
    }
    Ok(out)
}

/// The full suite over `seeds`, checked in parallel.
pub fn run_suite(seeds: &[u64]) -> Result<GradReport> {
    let per_seed = seeds.par_iter().map(|&s| run_seed(s)).collect::<Result<Vec<_>>>()?;
    Ok(GradReport {
        cases: per_seed.into_iter().flatten().collect(),
    })
}
