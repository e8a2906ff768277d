//! Merge functions over view encodings.
//!
//! Every fusion has two entry points:
//!
//! * [`Fusion::forward_available`] receives only the encodings of available
//!   views; missing views are physically absent.
//! * [`Fusion::forward_masked`] receives encodings for every declared view
//!   plus a per-row availability mask and excludes the missing ones inside
//!   the computation (masked softmax columns, skipped recurrent steps).
//!
//! For the dynamic fusions (average, gated, cross-attention, memory) the two
//! agree and the fused width is `d` for any non-empty mask. Concatenation is
//! the zero-imputation baseline with width `m·d`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{dropout, Affine, Ctx, LstmCell, MultiHeadAttention};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::views::MaskSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Average,
    Gated,
    Cross,
    Memory,
    Concat,
}

impl FusionKind {
    pub fn is_dynamic(self) -> bool {
        self != FusionKind::Concat
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Average => "average",
            FusionKind::Gated => "gated",
            FusionKind::Cross => "cross",
            FusionKind::Memory => "memory",
            FusionKind::Concat => "concat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permute {
    None,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub heads: usize,
    /// Attention layers (cross) or recurrent layers (memory). Defaults to 1
    /// and 2 respectively.
    pub layers: Option<usize>,
    pub dropout: f64,
    pub permute: Permute,
    pub attention_scaling: bool,
    pub bidirectional: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kind: FusionKind::Average,
            heads: 8,
            layers: None,
            dropout: 0.4,
            permute: Permute::None,
            attention_scaling: true,
            bidirectional: true,
        }
    }
}

impl FusionConfig {
    pub fn with_kind(kind: FusionKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.unwrap_or(match self.kind {
            FusionKind::Memory => 2,
            _ => 1,
        })
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("fusion.dropout must be in [0, 1)".into()));
        }
        if self.layer_count() == 0 {
            return Err(Error::Config("fusion.layers must be at least 1".into()));
        }
        match self.kind {
            FusionKind::Cross if self.heads == 0 || latent_dim % self.heads != 0 => Err(Error::Config(format!(
                "fusion.heads = {} must divide latent_dim = {latent_dim}",
                self.heads
            ))),
            FusionKind::Memory if self.bidirectional && latent_dim % 2 != 0 => Err(Error::Config(
                "bidirectional memory fusion needs an even latent_dim".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecurrentLayer {
    pub forward: LstmCell,
    pub backward: Option<LstmCell>,
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Average {
        dim: usize,
    },
    /// Per-dimension view weights `softmax(W_G·flatten(Z) + b)` over views.
    Gated {
        gate: Affine,
        views: usize,
        dim: usize,
    },
    /// Fusion token querying the stacked view encodings.
    Cross {
        token: ParamId,
        positions: ParamId,
        layers: Vec<MultiHeadAttention>,
        dropout: f64,
        views: usize,
        dim: usize,
    },
    /// Recurrent memory updated one view at a time from an empty state.
    Memory {
        layers: Vec<RecurrentLayer>,
        dropout: f64,
        permute: Permute,
        views: usize,
        dim: usize,
    },
    Concat {
        views: usize,
        dim: usize,
    },
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &FusionConfig,
        views: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        Ok(match cfg.kind {
            FusionKind::Average => Fusion::Average { dim },
            FusionKind::Concat => Fusion::Concat { views, dim },
            FusionKind::Gated => Fusion::Gated {
                gate: Affine::new(store, "fusion.gate", views * dim, dim * views, rng),
                views,
                dim,
            },
            FusionKind::Cross => {
                let token = store.add("fusion.token", Tensor::uniform(&[1, dim], 0.1, rng));
                let positions = store.add("fusion.positions", Tensor::uniform(&[views + 1, dim], 0.1, rng));
                let layers = (0..cfg.layer_count())
                    .map(|l| {
                        MultiHeadAttention::new(
                            store,
                            &format!("fusion.attn{l}"),
                            dim,
                            cfg.heads,
                            views + 1,
                            cfg.attention_scaling,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Fusion::Cross {
                    token,
                    positions,
                    layers,
                    dropout: cfg.dropout,
                    views,
                    dim,
                }
            }
            FusionKind::Memory => {
                let hidden = if cfg.bidirectional { dim / 2 } else { dim };
                let layers = (0..cfg.layer_count())
                    .map(|l| {
                        let d_in = if l == 0 {
                            dim
                        } else {
                            hidden * if cfg.bidirectional { 2 } else { 1 }
                        };
                        let forward = LstmCell::new(store, &format!("fusion.lstm{l}.fwd"), d_in, hidden, rng);
                        let backward = cfg
                            .bidirectional
                            .then(|| LstmCell::new(store, &format!("fusion.lstm{l}.bwd"), d_in, hidden, rng));
                        RecurrentLayer { forward, backward }
                    })
                    .collect();
                Fusion::Memory {
                    layers,
                    dropout: cfg.dropout,
                    permute: cfg.permute,
                    views,
                    dim,
                }
            }
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Average { .. } => FusionKind::Average,
            Fusion::Gated { .. } => FusionKind::Gated,
            Fusion::Cross { .. } => FusionKind::Cross,
            Fusion::Memory { .. } => FusionKind::Memory,
            Fusion::Concat { .. } => FusionKind::Concat,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Fusion::Concat { views, dim } => views * dim,
            Fusion::Average { dim }
            | Fusion::Gated { dim, .. }
            | Fusion::Cross { dim, .. }
            | Fusion::Memory { dim, .. } => *dim,
        }
    }

    /// View order for the recurrent pass: declaration order, or a random
    /// permutation in training when configured.
    pub fn order(&self, available: &[usize], ctx: &mut Ctx) -> Vec<usize> {
        let mut order = available.to_vec();
        if let Fusion::Memory {
            permute: Permute::Random,
            ..
        } = self
        {
            if ctx.is_train() {
                order.shuffle(ctx.rng());
            }
        }
        order
    }

    /// Fuses only the given `(view index, encoding)` pairs, in the given order.
    pub fn forward_available(&self, s: &mut Session, available: &[(usize, Var)], ctx: &mut Ctx) -> Result<Var> {
        if available.is_empty() {
            return Err(Error::EmptyMask);
        }
        let batch = s.value(available[0].1).rows();
        match self {
            Fusion::Average { .. } => {
                let mut acc = available[0].1;
                for &(_, z) in &available[1..] {
                    acc = s.graph.add(acc, z)?;
                }
                s.graph.scale(acc, 1.0 / available.len() as f64)
            }
            Fusion::Gated { gate, views, dim } => {
                let full = impute_zeros(s, available, *views, batch, *dim)?;
                let excluded: Vec<bool> = (0..batch * dim)
                    .flat_map(|_| (0..*views).map(|v| !available.iter().any(|&(i, _)| i == v)))
                    .collect();
                gated(s, gate, &full, &excluded, *views, *dim)
            }
            Fusion::Cross {
                token,
                positions,
                layers,
                dropout: p,
                dim,
                ..
            } => {
                let mut rows = Vec::with_capacity(available.len() + 1);
                let token_row = embed_token(s, *token, *positions, batch)?;
                rows.push(token_row);
                let mut ids = vec![0];
                for &(v, z) in available {
                    rows.push(add_position(s, z, *positions, v + 1)?);
                    ids.push(v + 1);
                }
                let mut x = s.graph.interleave_rows(&rows)?;
                for layer in layers {
                    x = layer.forward(s, x, batch, &ids, None, *p, ctx)?.out;
                }
                let len = ids.len();
                let token_rows: Vec<usize> = (0..batch).map(|b| b * len).collect();
                let out = s.graph.gather_rows(x, &token_rows)?;
                debug_assert_eq!(s.value(out).cols(), *dim);
                Ok(out)
            }
            Fusion::Memory { layers, dropout: p, .. } => {
                let mut seq: Vec<Var> = available.iter().map(|&(_, z)| z).collect();
                let keep = vec![vec![true; batch]; seq.len()];
                memory(s, layers, &mut seq, &keep, *p, ctx)
            }
            Fusion::Concat { views, dim } => {
                let full = impute_zeros(s, available, *views, batch, *dim)?;
                s.graph.concat_cols(&full)
            }
        }
    }

    /// Fuses encodings of all `m` views, honoring one mask per row.
    pub fn forward_masked(&self, s: &mut Session, all: &[Var], masks: &[MaskSet], ctx: &mut Ctx) -> Result<Var> {
        let m = all.len();
        let batch = masks.len();
        for &z in all {
            if s.value(z).rows() != batch {
                return Err(Error::shape("fusion", "one mask per row required"));
            }
        }
        if masks.iter().any(|mk| mk.num_views() != m || mk.is_empty()) {
            return Err(Error::EmptyMask);
        }
        let keep: Vec<Vec<bool>> = (0..m)
            .map(|v| masks.iter().map(|mk| mk.contains(v)).collect())
            .collect();
        match self {
            Fusion::Average { dim } => {
                let mut acc: Option<Var> = None;
                for (v, &z) in all.iter().enumerate() {
                    let weights: Vec<f64> = masks
                        .iter()
                        .flat_map(|mk| {
                            let w = if mk.contains(v) { 1.0 / mk.len() as f64 } else { 0.0 };
                            std::iter::repeat_n(w, *dim)
                        })
                        .collect();
                    let term = s.graph.mul_const(z, weights)?;
                    acc = Some(match acc {
                        Some(a) => s.graph.add(a, term)?,
                        None => term,
                    });
                }
                Ok(acc.expect("at least one view"))
            }
            Fusion::Gated { gate, views, dim } => {
                let (full, excluded) = masked_gate_inputs(s, all, masks, &keep, *views, *dim);
                gated(s, gate, &full?, &excluded, *views, *dim)
            }
            Fusion::Cross {
                token,
                positions,
                layers,
                dropout: p,
                ..
            } => {
                let mut rows = Vec::with_capacity(m + 1);
                rows.push(embed_token(s, *token, *positions, batch)?);
                for (v, &z) in all.iter().enumerate() {
                    rows.push(add_position(s, z, *positions, v + 1)?);
                }
                let ids: Vec<usize> = (0..=m).collect();
                let len = m + 1;
                let mut x = s.graph.interleave_rows(&rows)?;
                for layer in layers {
                    let heads = layer.heads;
                    let excluded: Vec<bool> = masks
                        .iter()
                        .flat_map(|mk| {
                            (0..heads * len).flat_map(move |_| (0..len).map(move |j| j > 0 && !mk.contains(j - 1)))
                        })
                        .collect();
                    x = layer.forward(s, x, batch, &ids, Some(&excluded), *p, ctx)?.out;
                }
                let token_rows: Vec<usize> = (0..batch).map(|b| b * len).collect();
                s.graph.gather_rows(x, &token_rows)
            }
            Fusion::Memory { layers, dropout: p, .. } => {
                let mut seq = all.to_vec();
                memory(s, layers, &mut seq, &keep, *p, ctx)
            }
            Fusion::Concat { dim, .. } => {
                let zeros = s.constant(Tensor::zeros(&[batch, *dim]));
                let full = all
                    .iter()
                    .enumerate()
                    .map(|(v, &z)| s.graph.select_rows(&keep[v], z, zeros))
                    .collect::<Result<Vec<_>>>()?;
                s.graph.concat_cols(&full)
            }
        }
    }

    /// Gated fusion only: per-dimension view weights, `(B·d) × m`, row
    /// `b·d + k`, under per-row masks.
    pub fn gate_weights(&self, s: &mut Session, all: &[Var], masks: &[MaskSet]) -> Result<Var> {
        let Fusion::Gated { gate, views, dim } = self else {
            return Err(Error::InvalidArgument(
                "gate weights exist only for gated fusion".into(),
            ));
        };
        let keep: Vec<Vec<bool>> = (0..*views)
            .map(|v| masks.iter().map(|mk| mk.contains(v)).collect())
            .collect();
        let (full, excluded) = masked_gate_inputs(s, all, masks, &keep, *views, *dim);
        gate_weights(s, gate, &full?, &excluded, *views, *dim)
    }
}

fn masked_gate_inputs(
    s: &mut Session,
    all: &[Var],
    masks: &[MaskSet],
    keep: &[Vec<bool>],
    views: usize,
    dim: usize,
) -> (Result<Vec<Var>>, Vec<bool>) {
    let zeros = s.constant(Tensor::zeros(&[masks.len(), dim]));
    let full = all
        .iter()
        .enumerate()
        .map(|(v, &z)| s.graph.select_rows(&keep[v], z, zeros))
        .collect();
    let excluded = masks
        .iter()
        .flat_map(|mk| (0..dim).flat_map(move |_| (0..views).map(move |v| !mk.contains(v))))
        .collect();
    (full, excluded)
}

fn impute_zeros(
    s: &mut Session,
    available: &[(usize, Var)],
    views: usize,
    batch: usize,
    dim: usize,
) -> Result<Vec<Var>> {
    let mut zeros = None;
    (0..views)
        .map(|v| match available.iter().find(|&&(i, _)| i == v) {
            Some(&(_, z)) => Ok(z),
            None => Ok(*zeros.get_or_insert_with(|| s.constant(Tensor::zeros(&[batch, dim])))),
        })
        .collect()
}

fn gate_weights(
    s: &mut Session,
    gate: &Affine,
    full: &[Var],
    excluded: &[bool],
    views: usize,
    dim: usize,
) -> Result<Var> {
    let batch = s.value(full[0]).rows();
    let flat = s.graph.concat_cols(full)?;
    // Logit for (dimension k, view v) sits at column k·m + v.
    let logits = gate.forward(s, flat)?;
    let logits = s.graph.reshape(logits, vec![batch * dim, views])?;
    s.graph.softmax_rows(logits, Some(excluded))
}

fn gated(s: &mut Session, gate: &Affine, full: &[Var], excluded: &[bool], views: usize, dim: usize) -> Result<Var> {
    let batch = s.value(full[0]).rows();
    let weights = gate_weights(s, gate, full, excluded, views, dim)?;
    let values = s.graph.interleave_cols(full)?;
    let values = s.graph.reshape(values, vec![batch * dim, views])?;
    let weighted = s.graph.mul(weights, values)?;
    let fused = s.graph.sum_cols(weighted)?;
    s.graph.reshape(fused, vec![batch, dim])
}

fn embed_token(s: &mut Session, token: ParamId, positions: ParamId, batch: usize) -> Result<Var> {
    let t = s.param(token);
    let t = add_position(s, t, positions, 0)?;
    s.graph.broadcast_rows(t, batch)
}

fn add_position(s: &mut Session, z: Var, positions: ParamId, slot: usize) -> Result<Var> {
    let pos = s.param(positions);
    let row = s.graph.gather_rows(pos, &[slot])?;
    s.graph.add_row(z, row)
}

/// Stacked (optionally bidirectional) LSTM over `seq`. `keep[t][b]` false
/// means row `b` skips step `t`: its state passes through unchanged.
fn memory(
    s: &mut Session,
    layers: &[RecurrentLayer],
    seq: &mut Vec<Var>,
    keep: &[Vec<bool>],
    p: f64,
    ctx: &mut Ctx,
) -> Result<Var> {
    let batch = s.value(seq[0]).rows();
    let steps = seq.len();
    let all_kept = keep.iter().all(|k| k.iter().all(|&x| x));
    let mut finals = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let run = |s: &mut Session, cell: &LstmCell, order: &mut dyn Iterator<Item = usize>| {
            let mut h = s.constant(Tensor::zeros(&[batch, cell.d_h]));
            let mut c = h;
            let mut outs = vec![h; steps];
            for t in order {
                let (hn, cn) = cell.step(s, seq_at(seq, t), h, c)?;
                if all_kept {
                    h = hn;
                    c = cn;
                } else {
                    h = s.graph.select_rows(&keep[t], hn, h)?;
                    c = s.graph.select_rows(&keep[t], cn, c)?;
                }
                outs[t] = h;
            }
            Ok::<_, Error>((outs, h))
        };
        let (fwd_out, fwd_final) = run(s, &layer.forward, &mut (0..steps))?;
        let (outs, last) = match &layer.backward {
            Some(cell) => {
                let (bwd_out, bwd_final) = run(s, cell, &mut (0..steps).rev())?;
                let outs = fwd_out
                    .iter()
                    .zip(&bwd_out)
                    .map(|(&f, &b)| s.graph.concat_cols(&[f, b]))
                    .collect::<Result<Vec<_>>>()?;
                (outs, s.graph.concat_cols(&[fwd_final, bwd_final])?)
            }
            None => (fwd_out, fwd_final),
        };
        finals.push(last);
        if l + 1 < layers.len() {
            *seq = outs
                .into_iter()
                .map(|o| dropout(s, o, p, ctx))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    Ok(*finals.last().expect("at least one recurrent layer"))
}

fn seq_at(seq: &[Var], t: usize) -> Var {
    seq[t]
}
