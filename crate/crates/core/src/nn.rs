//! Layers built on the graph: affine, temporal convolution, layer
//! normalization, dropout, LSTM cells and multi-head attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{AttnGeom, Var};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-10;

/// Forward-pass mode. Dropout draws from `rng` only in training mode.
pub struct Ctx {
    train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { train: true, rng }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in eval mode
/// and at `p = 0`.
pub fn dropout(s: &mut Session, x: Var, p: f64, ctx: &mut Ctx) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout rate {p} not in [0, 1)")));
    }
    if !ctx.train || p == 0.0 {
        return Ok(x);
    }
    let n = s.value(x).len();
    let keep = 1.0 / (1.0 - p);
    let factor = (0..n)
        .map(|_| if ctx.rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    s.graph.mul_const(x, factor)
}

/// `y = x·Wᵀ + b` for a batch of row vectors; `W` is `d_out × d_in`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_glorot(format!("{name}.w"), d_out, d_in, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        if s.value(x).cols() != self.d_in {
            return Err(Error::shape(
                "affine",
                format!("input width {} vs {}", s.value(x).cols(), self.d_in),
            ));
        }
        let w = s.param(self.w);
        let b = s.param(self.b);
        let y = s.graph.matmul_bt(x, w)?;
        s.graph.add_row(y, b)
    }
}

/// Same-padded 1D convolution over time. Input `(B·T) × c_in`, output
/// `(B·T) × c_out`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), c_out, kernel * c_in, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, c_out]));
        Self {
            w,
            b,
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(Error::InvalidArgument("empty series".into()));
        }
        if s.value(x).cols() != self.c_in {
            return Err(Error::shape(
                "conv1d",
                format!("{} channels vs {}", s.value(x).cols(), self.c_in),
            ));
        }
        let cols = s.graph.unfold(x, steps, self.kernel)?;
        let w = s.param(self.w);
        let b = s.param(self.b);
        let y = s.graph.matmul_bt(cols, w)?;
        s.graph.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[1, dim]));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[1, dim]));
        Self { gain, shift, dim }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        if s.value(x).cols() != self.dim {
            return Err(Error::shape("layer_norm", "width mismatch"));
        }
        let y = s.graph.normalize_rows(x, LAYER_NORM_EPS)?;
        let g = s.param(self.gain);
        let b = s.param(self.shift);
        let y = s.graph.mul_row(y, g)?;
        s.graph.add_row(y, b)
    }
}

/// Gate weights are `d_h × (d_in + d_h)` and act on `[x, h_prev]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_gate: (ParamId, ParamId),
    pub forget_gate: (ParamId, ParamId),
    pub output_gate: (ParamId, ParamId),
    pub candidate: (ParamId, ParamId),
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let mut gate = |gname: &str, bias: f64| {
            let w = store.add_glorot(format!("{name}.{gname}.w"), d_h, d_in + d_h, rng);
            let b = store.add(format!("{name}.{gname}.b"), Tensor::filled(&[1, d_h], bias));
            (w, b)
        };
        let input_gate = gate("input", 0.0);
        let forget_gate = gate("forget", 1.0);
        let output_gate = gate("output", 0.0);
        let candidate = gate("candidate", 0.0);
        Self {
            input_gate,
            forget_gate,
            output_gate,
            candidate,
            d_in,
            d_h,
        }
    }

    /// One step for a batch: returns `(h, c)`.
    pub fn step(&self, s: &mut Session, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let (xv, hv, cv) = (s.value(x), s.value(h_prev), s.value(c_prev));
        if xv.cols() != self.d_in || hv.cols() != self.d_h || cv.cols() != self.d_h {
            return Err(Error::shape(
                "lstm_step",
                format!(
                    "x {:?}, h {:?}, c {:?} for d_in {} d_h {}",
                    xv.shape(),
                    hv.shape(),
                    cv.shape(),
                    self.d_in,
                    self.d_h
                ),
            ));
        }
        let xh = s.graph.concat_cols(&[x, h_prev])?;
        let pre = |s: &mut Session, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let w = s.param(w);
            let b = s.param(b);
            let y = s.graph.matmul_bt(xh, w)?;
            s.graph.add_row(y, b)
        };
        let i = pre(s, self.input_gate)?;
        let f = pre(s, self.forget_gate)?;
        let o = pre(s, self.output_gate)?;
        let g = pre(s, self.candidate)?;
        let i = s.graph.sigmoid(i)?;
        let f = s.graph.sigmoid(f)?;
        let o = s.graph.sigmoid(o)?;
        let g = s.graph.tanh(g)?;
        let keep = s.graph.mul(f, c_prev)?;
        let write = s.graph.mul(i, g)?;
        let c = s.graph.add(keep, write)?;
        let tc = s.graph.tanh(c)?;
        let h = s.graph.mul(o, tc)?;
        Ok((h, c))
    }
}

/// Multi-head scaled dot-product self-attention with learned projections
/// and a learned logit bias per head and key identity.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub key_slots: usize,
    pub scaled: bool,
}

pub struct AttentionOutput {
    pub out: Var,
    pub probs: Var,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        key_slots: usize,
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        let w_q = store.add_glorot(format!("{name}.w_q"), dim, dim, rng);
        let w_k = store.add_glorot(format!("{name}.w_k"), dim, dim, rng);
        let w_v = store.add_glorot(format!("{name}.w_v"), dim, dim, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[heads, key_slots]));
        Ok(Self {
            w_q,
            w_k,
            w_v,
            bias,
            dim,
            heads,
            key_slots,
            scaled,
        })
    }

    pub fn scale(&self) -> f64 {
        if self.scaled {
            1.0 / ((self.dim / self.heads) as f64).sqrt()
        } else {
            1.0
        }
    }

    /// `x` holds `batch` sequences of `key_ids.len()` rows. `key_ids[j]` names
    /// the bias slot of position `j`. `excluded` optionally flags, per
    /// `(b, h, i, j)` logit, keys dropped from the softmax.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        s: &mut Session,
        x: Var,
        batch: usize,
        key_ids: &[usize],
        excluded: Option<&[bool]>,
        attn_dropout: f64,
        ctx: &mut Ctx,
    ) -> Result<AttentionOutput> {
        let geom = AttnGeom {
            batch,
            len: key_ids.len(),
            heads: self.heads,
            dim: self.dim,
        };
        let (wq, wk, wv) = (s.param(self.w_q), s.param(self.w_k), s.param(self.w_v));
        let q = s.graph.matmul_bt(x, wq)?;
        let k = s.graph.matmul_bt(x, wk)?;
        let v = s.graph.matmul_bt(x, wv)?;
        let scores = s.graph.attn_scores(q, k, geom, self.scale())?;
        let bias = s.param(self.bias);
        let scores = s.graph.add_key_bias(scores, bias, self.heads, key_ids)?;
        let probs = s.graph.softmax_rows(scores, excluded)?;
        let dropped = dropout(s, probs, attn_dropout, ctx)?;
        let out = s.graph.attn_apply(dropped, v, geom)?;
        Ok(AttentionOutput { out, probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::softmax;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut store = ParamStore::new();
        let layer = Affine::new(&mut store, "a", 3, 3, &mut rng(0));
        *store.get_mut(layer.w) = Tensor::identity(3);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, 5.0]).unwrap());
        let y = layer.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), s.value(x).data());

        let mut store = ParamStore::new();
        let layer = Affine::new(&mut store, "a", 3, 2, &mut rng(0));
        *store.get_mut(layer.w) = Tensor::zeros(&[2, 3]);
        *store.get_mut(layer.b) = Tensor::row(vec![0.25, -4.0]);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = layer.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn affine_matches_dense_oracle() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let layer = Affine::new(&mut store, "a", 4, 3, &mut r);
        *store.get_mut(layer.b) = Tensor::uniform(&[1, 3], 1.0, &mut r);
        let x = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let mut s = Session::new(&store);
        let xv = s.constant(x.clone());
        let y = layer.forward(&mut s, xv).unwrap();
        let (w, b) = (store.get(layer.w), store.get(layer.b));
        for n in 0..5 {
            for o in 0..3 {
                let mut acc = b.data()[o];
                for i in 0..4 {
                    acc += w.at(o, i) * x.at(n, i);
                }
                assert!((s.value(y).at(n, o) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_dim_mismatch() {
        let mut store = ParamStore::new();
        let layer = Affine::new(&mut store, "a", 4, 3, &mut rng(0));
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::zeros(&[1, 5]));
        assert!(layer.forward(&mut s, x).is_err());
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 1, 1, 3, &mut rng(0));
        *store.get_mut(conv.w) = Tensor::row(vec![0.0, 1.0, 0.0]);
        let series = vec![0.3, -1.0, 2.0, 5.0, 0.0];
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::matrix(5, 1, series.clone()).unwrap());
        let y = conv.forward(&mut s, x, 5).unwrap();
        assert_eq!(s.value(y).data(), series.as_slice());
    }

    #[test]
    fn conv_averaging_kernel_keeps_constant_interior() {
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 1, 1, 3, &mut rng(0));
        *store.get_mut(conv.w) = Tensor::row(vec![1.0 / 3.0; 3]);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::filled(&[6, 1], 2.5));
        let y = conv.forward(&mut s, x, 6).unwrap();
        for t in 1..5 {
            assert!((s.value(y).data()[t] - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut r = rng(5);
        let (b, t, c_in, c_out) = (2, 7, 3, 4);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", c_in, c_out, 3, &mut r);
        *store.get_mut(conv.b) = Tensor::uniform(&[1, c_out], 1.0, &mut r);
        let x = Tensor::uniform(&[b * t, c_in], 1.0, &mut r);
        let mut s = Session::new(&store);
        let xv = s.constant(x.clone());
        let y = conv.forward(&mut s, xv, t).unwrap();
        let (w, bias) = (store.get(conv.w), store.get(conv.b));
        for bi in 0..b {
            for ti in 0..t {
                for o in 0..c_out {
                    let mut acc = bias.data()[o];
                    for k in 0..3 {
                        let src = ti as isize + k as isize - 1;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        for ci in 0..c_in {
                            acc += w.at(o, k * c_in + ci) * x.at(bi * t + src as usize, ci);
                        }
                    }
                    assert!((s.value(y).at(bi * t + ti, o) - acc).abs() < 1e-13);
                }
            }
        }
        assert_eq!(s.value(y).rows(), b * t);
    }

    #[test]
    fn conv_rejects_empty_series() {
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 1, 1, 3, &mut rng(0));
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::zeros(&[0, 1]));
        assert!(conv.forward(&mut s, x, 0).is_err());
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 16);
        let x = Tensor::uniform(&[3, 16], 1.0, &mut r);
        let mut s = Session::new(&store);
        let xv = s.constant(x.clone());
        let y = ln.forward(&mut s, xv).unwrap();
        for row in 0..3 {
            let yr = s.value(y).row_slice(row);
            let mean = yr.iter().sum::<f64>() / 16.0;
            let var = yr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
            // two-pass oracle
            let xr = x.row_slice(row);
            let mu = xr.iter().sum::<f64>() / 16.0;
            let sd = (xr.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0).sqrt();
            for (a, b) in yr.iter().zip(xr) {
                assert!((a - (b - mu) / sd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn layer_norm_constant_input_gives_shift() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        *store.get_mut(ln.shift) = Tensor::row(vec![0.1, 0.2, 0.3, 0.4]);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::filled(&[1, 4], 3.0));
        let y = ln.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn dropout_identity_cases() {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::ones(&[4, 4]));
        let mut train = Ctx::train(rng(1));
        assert_eq!(dropout(&mut s, x, 0.0, &mut train).unwrap(), x);
        let mut eval = Ctx::eval();
        assert_eq!(dropout(&mut s, x, 0.5, &mut eval).unwrap(), x);
        let y = dropout(&mut s, x, 0.5, &mut train).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(dropout(&mut s, x, 1.0, &mut train).is_err());
    }

    #[test]
    fn lstm_zero_weights_zero_state() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 3, 2, &mut rng(0));
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::row(vec![1.0, -1.0, 0.5]));
        let h0 = s.constant(Tensor::zeros(&[1, 2]));
        let c0 = s.constant(Tensor::zeros(&[1, 2]));
        let (h, c) = cell.step(&mut s, x, h0, c0).unwrap();
        assert_eq!(s.value(h).data(), &[0.0, 0.0]);
        assert_eq!(s.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_matches_gate_oracle() {
        let mut r = rng(21);
        let (d_in, d_h) = (3, 2);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", d_in, d_h, &mut r);
        let x = Tensor::uniform(&[1, d_in], 1.0, &mut r);
        let h0 = Tensor::uniform(&[1, d_h], 1.0, &mut r);
        let c0 = Tensor::uniform(&[1, d_h], 1.0, &mut r);
        let mut s = Session::new(&store);
        let (xv, hv, cv) = (s.constant(x.clone()), s.constant(h0.clone()), s.constant(c0.clone()));
        let (h, c) = cell.step(&mut s, xv, hv, cv).unwrap();

        let xh: Vec<f64> = x.data().iter().chain(h0.data()).copied().collect();
        let gate = |(w, b): (ParamId, ParamId), j: usize| {
            let (w, b) = (store.get(w), store.get(b));
            b.data()[j] + (0..d_in + d_h).map(|k| w.at(j, k) * xh[k]).sum::<f64>()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..d_h {
            let i = sig(gate(cell.input_gate, j));
            let f = sig(gate(cell.forget_gate, j));
            let o = sig(gate(cell.output_gate, j));
            let g = gate(cell.candidate, j).tanh();
            let c_new = f * c0.data()[j] + i * g;
            let h_new = o * c_new.tanh();
            assert!((s.value(c).data()[j] - c_new).abs() < 1e-14);
            assert!((s.value(h).data()[j] - h_new).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_gate_shapes() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 5, 3, &mut rng(0));
        assert_eq!(store.get(cell.forget_gate.0).shape(), &[3, 8]);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::zeros(&[1, 4]));
        let h = s.constant(Tensor::zeros(&[1, 3]));
        assert!(cell.step(&mut s, x, h, h).is_err());
    }

    fn attention_fixture(dim: usize, heads: usize, scaled: bool, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "att", dim, heads, 4, scaled, &mut r).unwrap();
        *store.get_mut(mha.bias) = Tensor::uniform(&[heads, 4], 0.5, &mut r);
        (store, mha)
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, mha) = attention_fixture(8, 2, true, 3);
        let mut r = rng(4);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::uniform(&[6, 8], 1.0, &mut r));
        let out = mha
            .forward(&mut s, x, 2, &[0, 1, 2], None, 0.0, &mut Ctx::eval())
            .unwrap();
        let p = s.value(out.probs);
        for row in 0..p.rows() {
            assert!((p.row_slice(row).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        assert_eq!(s.value(out.out).shape(), &[6, 8]);
    }

    #[test]
    fn attention_single_row_returns_value_projection() {
        let (store, mha) = attention_fixture(4, 2, true, 8);
        let mut r = rng(2);
        let x = Tensor::uniform(&[1, 4], 1.0, &mut r);
        let mut s = Session::new(&store);
        let xv = s.constant(x.clone());
        let out = mha.forward(&mut s, xv, 1, &[0], None, 0.0, &mut Ctx::eval()).unwrap();
        let wv = store.get(mha.w_v);
        for j in 0..4 {
            let expected: f64 = (0..4).map(|k| wv.at(j, k) * x.data()[k]).sum();
            assert!((s.value(out.out).data()[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_matches_matrix_oracle() {
        let (store, mha) = attention_fixture(4, 1, true, 13);
        let mut r = rng(14);
        let n = 3;
        let z = Tensor::uniform(&[n, 4], 1.0, &mut r);
        let ids = [0, 2, 3];
        let mut s = Session::new(&store);
        let zv = s.constant(z.clone());
        let out = mha.forward(&mut s, zv, 1, &ids, None, 0.0, &mut Ctx::eval()).unwrap();

        // softmax(Z Wqᵀ (Z Wkᵀ)ᵀ · s + b) · Z Wvᵀ, built with an independent
        // dense product helper.
        let proj = |w: &Tensor| {
            let mut g = Graph::new();
            let a = g.constant(z.clone());
            let b = g.constant(w.clone());
            let y = g.matmul_bt(a, b).unwrap();
            g.value(y).clone()
        };
        let q = proj(store.get(mha.w_q));
        let k = proj(store.get(mha.w_k));
        let v = proj(store.get(mha.w_v));
        let bias = store.get(mha.bias);
        let scale = 0.5;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..4).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale + bias.at(0, ids[j]))
                .collect();
            let p = softmax(&logits, None).unwrap();
            for c in 0..4 {
                let expected: f64 = (0..n).map(|j| p[j] * v.at(j, c)).sum();
                assert!((s.value(out.out).at(i, c) - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, 2, true, &mut rng(0)).is_err());
    }
}
