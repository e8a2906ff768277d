//! Reverse-mode automatic differentiation over a recorded op graph.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order. `backward` walks them in reverse once.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    NormalizeRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    InterleaveRows(Vec<Var>),
    InterleaveCols(Vec<Var>),
    SelectRows {
        a: Var,
        b: Var,
        keep: Vec<bool>,
    },
    Reshape(Var),
    Unfold {
        x: Var,
        steps: usize,
        kernel: usize,
    },
    MeanPoolGroups {
        x: Var,
        group: usize,
    },
    AttnScores {
        q: Var,
        k: Var,
        geom: AttnGeom,
        scale: f64,
    },
    AttnApply {
        p: Var,
        v: Var,
        geom: AttnGeom,
    },
    AddKeyBias {
        s: Var,
        bias: Var,
        heads: usize,
        ids: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

/// Layout of a batch of attention sequences stored as `(batch·len) × dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of the graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; nodes the root does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input: data, targets, fixed masks.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        let out = Tensor::matrix(n, m, tensor::matmul(av.data(), bv.data(), n, k, m))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} · {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::matrix(n, m, tensor::matmul_bt(av.data(), bv.data(), n, k, m))?;
        self.push("matmul_bt", out, Op::MatMulBt(a, b), &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let m = xv.cols();
        if rv.len() != m {
            return Err(Error::shape(
                name,
                format!("row of {} against {:?}", rv.len(), xv.shape()),
            ));
        }
        let row = rv.data();
        let data = xv
            .data()
            .chunks(m.max(1))
            .flat_map(|chunk| chunk.iter().zip(row).map(|(&a, &b)| f(a, b)))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(name, out, op, &[x, r])
    }

    /// Adds a `1×m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, r, |a, b| a + b, Op::AddRow(x, r))
    }

    /// Multiplies every row of `x` elementwise by a `1×m` row.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, r, |a, b| a * b, Op::MulRow(x, r))
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::matrix(n, m, data)?;
        self.push("broadcast_rows", out, Op::BroadcastRows(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a fixed (non-differentiable) factor.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} factors for {:?}", factor.len(), xv.shape()),
            ));
        }
        let data = xv.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(x, factor), &[x])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("mean_all", "empty input"));
        }
        let s = xv.sum() / xv.len() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Row sums: `n×m → n×1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let data = (0..n).map(|r| xv.data()[r * m..(r + 1) * m].iter().sum()).collect();
        let out = Tensor::matrix(n, 1, data)?;
        self.push("sum_cols", out, Op::SumCols(x), &[x])
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` with the
    /// population variance.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if m < 2 {
            return Err(Error::shape("normalize_rows", "rows need at least 2 entries"));
        }
        let mut data = vec![0.0; n * m];
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xv.data()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in data[r * m..(r + 1) * m].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("normalize_rows", out, Op::NormalizeRows { x, inv_std }, &[x])
    }

    /// Row-wise softmax. `excluded`, when given, has one flag per element;
    /// flagged entries are dropped from the normalization and come out as 0.
    pub fn softmax_rows(&mut self, x: Var, excluded: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if let Some(e) = excluded {
            if e.len() != n * m {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("{} mask flags for {n}x{m}", e.len()),
                ));
            }
        }
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let mask = excluded.map(|e| &e[r * m..(r + 1) * m]);
            tensor::softmax_into(&xv.data()[r * m..(r + 1) * m], mask, &mut data[r * m..(r + 1) * m])?;
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = self.value(xs[0]).rows();
        let mut total = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rows() != n {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        self.push("concat_cols", out, Op::ConcatCols(xs.to_vec()), xs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if start > end || end > m {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {m}")));
        }
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&xv.row_slice(r)[start..end]);
        }
        let out = Tensor::matrix(n, end - start, data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &x in xs {
            let v = self.value(x);
            if v.cols() != m {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            n += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(n, m, data)?;
        self.push("concat_rows", out, Op::ConcatRows(xs.to_vec()), xs)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {}", xv.rows())));
        }
        let out = Tensor::matrix(idx.len(), xv.cols(), xv.gather_rows(idx).into_data())?;
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Stacks `L` inputs of shape `B×d` into `(B·L)×d`, with row `b·L + l`
    /// taken from input `l`.
    pub fn interleave_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let (b, d) = (self.value(xs[0]).rows(), self.value(xs[0]).cols());
        for &x in xs {
            let v = self.value(x);
            if v.rows() != b || v.cols() != d {
                return Err(Error::shape("interleave_rows", "inputs differ in shape"));
            }
        }
        let mut data = Vec::with_capacity(b * xs.len() * d);
        for r in 0..b {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        let out = Tensor::matrix(b * xs.len(), d, data)?;
        self.push("interleave_rows", out, Op::InterleaveRows(xs.to_vec()), xs)
    }

    /// Merges `m` inputs of shape `B×d` into `B×(d·m)`, with column
    /// `k·m + v` taken from column `k` of input `v`.
    pub fn interleave_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let (b, d) = (self.value(xs[0]).rows(), self.value(xs[0]).cols());
        for &x in xs {
            let v = self.value(x);
            if v.rows() != b || v.cols() != d {
                return Err(Error::shape("interleave_cols", "inputs differ in shape"));
            }
        }
        let m = xs.len();
        let mut data = vec![0.0; b * d * m];
        for (vi, &x) in xs.iter().enumerate() {
            let src = self.value(x).data();
            for r in 0..b {
                for k in 0..d {
                    data[r * d * m + k * m + vi] = src[r * d + k];
                }
            }
        }
        let out = Tensor::matrix(b, d * m, data)?;
        self.push("interleave_cols", out, Op::InterleaveCols(xs.to_vec()), xs)
    }

    /// Row `r` of the output is row `r` of `a` where `keep[r]`, else of `b`.
    pub fn select_rows(&mut self, keep: &[bool], a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("select_rows", av, bv)?;
        if keep.len() != av.rows() {
            return Err(Error::shape("select_rows", "one flag per row required"));
        }
        let m = av.cols();
        let mut data = Vec::with_capacity(av.len());
        for (r, &k) in keep.iter().enumerate() {
            let src = if k { av } else { bv };
            data.extend_from_slice(&src.data()[r * m..(r + 1) * m]);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(
            "select_rows",
            out,
            Op::SelectRows {
                a,
                b,
                keep: keep.to_vec(),
            },
            &[a, b],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Sliding windows for a same-padded temporal convolution.
    ///
    /// `x` holds `B` series of `steps` rows each, stacked as `(B·steps)×c`.
    /// Output row `b·steps + t` is the concatenation of rows `t - kernel/2 ..=
    /// t + kernel/2` of series `b`, with zeros outside the series.
    pub fn unfold(&mut self, x: Var, steps: usize, kernel: usize) -> Result<Var> {
        let xv = self.value(x);
        if steps == 0 || xv.rows() % steps != 0 {
            return Err(Error::shape(
                "unfold",
                format!("{} rows not divisible into series of {steps}", xv.rows()),
            ));
        }
        if kernel % 2 == 0 {
            return Err(Error::shape("unfold", "kernel size must be odd"));
        }
        let (rows, c) = (xv.rows(), xv.cols());
        let half = kernel / 2;
        let mut data = vec![0.0; rows * kernel * c];
        for r in 0..rows {
            let (b, t) = (r / steps, r % steps);
            for k in 0..kernel {
                let src_t = t as isize + k as isize - half as isize;
                if src_t < 0 || src_t >= steps as isize {
                    continue;
                }
                let src = b * steps + src_t as usize;
                let dst = r * kernel * c + k * c;
                data[dst..dst + c].copy_from_slice(xv.row_slice(src));
            }
        }
        let out = Tensor::matrix(rows, kernel * c, data)?;
        self.push("unfold", out, Op::Unfold { x, steps, kernel }, &[x])
    }

    /// Means over consecutive groups of `group` rows.
    pub fn mean_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 {
            return Err(Error::shape("mean_pool_groups", "rows not divisible by group"));
        }
        let (n, c) = (xv.rows() / group, xv.cols());
        let mut data = vec![0.0; n * c];
        for r in 0..xv.rows() {
            let dst = &mut data[(r / group) * c..(r / group + 1) * c];
            for (o, v) in dst.iter_mut().zip(xv.row_slice(r)) {
                *o += v;
            }
        }
        for v in &mut data {
            *v /= group as f64;
        }
        let out = Tensor::matrix(n, c, data)?;
        self.push("mean_pool_groups", out, Op::MeanPoolGroups { x, group }, &[x])
    }

    fn check_geom(&self, op: &'static str, x: Var, geom: AttnGeom) -> Result<()> {
        let v = self.value(x);
        if geom.heads == 0 || geom.dim % geom.heads != 0 {
            return Err(Error::shape(op, "dim not divisible by heads"));
        }
        if v.rows() != geom.batch * geom.len || v.cols() != geom.dim {
            return Err(Error::shape(op, format!("{:?} does not match {geom:?}", v.shape())));
        }
        Ok(())
    }

    /// Per-head scaled dot products. Output row `(b·H + h)·L + i` holds the
    /// logits of query `i` against every key of sequence `b`, head `h`.
    pub fn attn_scores(&mut self, q: Var, k: Var, geom: AttnGeom, scale: f64) -> Result<Var> {
        self.check_geom("attn_scores", q, geom)?;
        self.check_geom("attn_scores", k, geom)?;
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let AttnGeom { batch, len, heads, dim } = geom;
        let dh = geom.head_dim();
        let mut data = vec![0.0; batch * heads * len * len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..len {
                    let qrow = &qv[(b * len + i) * dim + h * dh..][..dh];
                    for j in 0..len {
                        let krow = &kv[(b * len + j) * dim + h * dh..][..dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                        data[((b * heads + h) * len + i) * len + j] = dot * scale;
                    }
                }
            }
        }
        let out = Tensor::matrix(batch * heads * len, len, data)?;
        self.push("attn_scores", out, Op::AttnScores { q, k, geom, scale }, &[q, k])
    }

    /// Adds `bias[h, ids[j]]` to every logit against key `j` in head `h`.
    pub fn add_key_bias(&mut self, s: Var, bias: Var, heads: usize, ids: &[usize]) -> Result<Var> {
        let (sv, bv) = (self.value(s), self.value(bias));
        let len = ids.len();
        if sv.cols() != len || sv.rows() % (heads * len) != 0 || bv.rows() != heads {
            return Err(Error::shape(
                "add_key_bias",
                format!("scores {:?}, bias {:?}", sv.shape(), bv.shape()),
            ));
        }
        let slots = bv.cols();
        if ids.iter().any(|&id| id >= slots) {
            return Err(Error::shape("add_key_bias", "key id beyond bias table"));
        }
        let mut data = sv.data().to_vec();
        for r in 0..sv.rows() {
            let h = (r / len) % heads;
            for (j, &id) in ids.iter().enumerate() {
                data[r * len + j] += bv.data()[h * slots + id];
            }
        }
        let out = Tensor::new(sv.shape().to_vec(), data)?;
        self.push(
            "add_key_bias",
            out,
            Op::AddKeyBias {
                s,
                bias,
                heads,
                ids: ids.to_vec(),
            },
            &[s, bias],
        )
    }

    /// Weighted sum of value rows per head, heads concatenated back to `dim`.
    pub fn attn_apply(&mut self, p: Var, v: Var, geom: AttnGeom) -> Result<Var> {
        self.check_geom("attn_apply", v, geom)?;
        let AttnGeom { batch, len, heads, dim } = geom;
        let pv = self.value(p);
        if pv.rows() != batch * heads * len || pv.cols() != len {
            return Err(Error::shape("attn_apply", "probability block shape"));
        }
        let (pd, vd) = (pv.data(), self.value(v).data());
        let dh = geom.head_dim();
        let mut data = vec![0.0; batch * len * dim];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..len {
                    let prow = &pd[((b * heads + h) * len + i) * len..][..len];
                    let orow = &mut data[(b * len + i) * dim + h * dh..][..dh];
                    for (j, &w) in prow.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(b * len + j) * dim + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(batch * len, dim, data)?;
        self.push("attn_apply", out, Op::AttnApply { p, v, geom }, &[p, v])
    }

    /// Per-row weighted cross-entropy `w[y]·(logsumexp(z) - z[y])`, as `n×1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::shape("softmax_cross_entropy", "one target per row"));
        }
        if weights.len() != c {
            return Err(Error::shape("softmax_cross_entropy", "one weight per class"));
        }
        let mut probs = vec![0.0; n * c];
        let mut losses = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::InvalidArgument(format!(
                    "class index {t} out of range for {c} classes"
                )));
            }
            let row = lv.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (p, z) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            losses.push(weights[t] * (lse - row[t]));
        }
        let out = Tensor::matrix(n, 1, losses)?;
        self.push(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    acc(*a, tensor::matmul_bt(g, bv.data(), n, m, k));
                }
                if self.rg(*b) {
                    acc(*b, tensor::matmul_at(av.data(), g, n, k, m));
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a·bᵀ, a: n×k, b: m×k
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    acc(*a, tensor::matmul(g, bv.data(), n, m, k));
                }
                if self.rg(*b) {
                    acc(*b, tensor::matmul_at(g, av.data(), n, m, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if self.rg(*a) {
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, r) => {
                acc(*x, g.to_vec());
                if self.rg(*r) {
                    let m = out.cols();
                    let mut dr = vec![0.0; m];
                    for chunk in g.chunks(m) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(*r, dr);
                }
            }
            Op::MulRow(x, r) => {
                let m = out.cols();
                let (xv, rv) = (val(*x).data(), val(*r).data());
                if self.rg(*x) {
                    let dx = g
                        .chunks(m)
                        .flat_map(|chunk| chunk.iter().zip(rv).map(|(a, b)| a * b))
                        .collect();
                    acc(*x, dx);
                }
                if self.rg(*r) {
                    let mut dr = vec![0.0; m];
                    for (gc, xc) in g.chunks(m).zip(xv.chunks(m)) {
                        for ((d, a), b) in dr.iter_mut().zip(gc).zip(xc) {
                            *d += a * b;
                        }
                    }
                    acc(*r, dr);
                }
            }
            Op::BroadcastRows(x) => {
                let m = out.cols();
                let mut dx = vec![0.0; m];
                for chunk in g.chunks(m) {
                    for (d, v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::MulConst(x, f) => acc(*x, g.iter().zip(f).map(|(a, b)| a * b).collect()),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(
                    *x,
                    g.iter().zip(xv).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect(),
                );
            }
            Op::Tanh(x) => acc(*x, g.iter().zip(out.data()).map(|(d, y)| d * (1.0 - y * y)).collect()),
            Op::Sigmoid(x) => acc(*x, g.iter().zip(out.data()).map(|(d, y)| d * y * (1.0 - y)).collect()),
            Op::SumAll(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::MeanAll(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumCols(x) => {
                let m = val(*x).cols();
                acc(*x, g.iter().flat_map(|&d| std::iter::repeat_n(d, m)).collect());
            }
            Op::NormalizeRows { x, inv_std } => {
                let m = out.cols();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * m..(r + 1) * m];
                    let yr = &y[r * m..(r + 1) * m];
                    let mean_g = gr.iter().sum::<f64>() / m as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for ((d, gi), yi) in dx[r * m..(r + 1) * m].iter_mut().zip(gr).zip(yr) {
                        *d = is * (gi - mean_g - yi * mean_gy);
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                let m = out.cols();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..out.rows() {
                    let gr = &g[r * m..(r + 1) * m];
                    let yr = &y[r * m..(r + 1) * m];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dx[r * m..(r + 1) * m].iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).cols();
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(out.rows() * w);
                        for r in 0..out.rows() {
                            dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(x, dx);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (val(*x).cols(), out.cols());
                let mut dx = vec![0.0; val(*x).len()];
                for r in 0..out.rows() {
                    dx[r * m + start..r * m + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).len();
                    acc(x, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let m = out.cols();
                let mut dx = vec![0.0; val(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, v) in dx[i * m..(i + 1) * m].iter_mut().zip(&g[r * m..(r + 1) * m]) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::InterleaveRows(xs) => {
                let l = xs.len();
                let (b, d) = (val(xs[0]).rows(), val(xs[0]).cols());
                for (li, &x) in xs.iter().enumerate() {
                    if !self.rg(x) {
                        continue;
                    }
                    let mut dx = Vec::with_capacity(b * d);
                    for r in 0..b {
                        dx.extend_from_slice(&g[(r * l + li) * d..(r * l + li + 1) * d]);
                    }
                    acc(x, dx);
                }
            }
            Op::InterleaveCols(xs) => {
                let m = xs.len();
                let (b, d) = (val(xs[0]).rows(), val(xs[0]).cols());
                for (vi, &x) in xs.iter().enumerate() {
                    if !self.rg(x) {
                        continue;
                    }
                    let mut dx = vec![0.0; b * d];
                    for r in 0..b {
                        for k in 0..d {
                            dx[r * d + k] = g[r * d * m + k * m + vi];
                        }
                    }
                    acc(x, dx);
                }
            }
            Op::SelectRows { a, b, keep } => {
                let m = out.cols();
                let mut da = vec![0.0; out.len()];
                let mut db = vec![0.0; out.len()];
                for (r, &k) in keep.iter().enumerate() {
                    let dst = if k { &mut da } else { &mut db };
                    dst[r * m..(r + 1) * m].copy_from_slice(&g[r * m..(r + 1) * m]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Unfold { x, steps, kernel } => {
                let xv = val(*x);
                let (rows, c) = (xv.rows(), xv.cols());
                let half = kernel / 2;
                let mut dx = vec![0.0; rows * c];
                for r in 0..rows {
                    let (b, t) = (r / steps, r % steps);
                    for k in 0..*kernel {
                        let src_t = t as isize + k as isize - half as isize;
                        if src_t < 0 || src_t >= *steps as isize {
                            continue;
                        }
                        let src = b * steps + src_t as usize;
                        let gslice = &g[r * kernel * c + k * c..][..c];
                        for (d, v) in dx[src * c..(src + 1) * c].iter_mut().zip(gslice) {
                            *d += v;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MeanPoolGroups { x, group } => {
                let c = out.cols();
                let rows = val(*x).rows();
                let mut dx = vec![0.0; rows * c];
                let inv = 1.0 / *group as f64;
                for r in 0..rows {
                    let src = &g[(r / group) * c..(r / group + 1) * c];
                    for (d, v) in dx[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *d = v * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::AttnScores { q, k, geom, scale } => {
                let AttnGeom { batch, len, heads, dim } = *geom;
                let dh = geom.head_dim();
                let (qv, kv) = (val(*q).data(), val(*k).data());
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..len {
                            let qi = (b * len + i) * dim + h * dh;
                            for j in 0..len {
                                let gij = g[((b * heads + h) * len + i) * len + j] * scale;
                                if gij == 0.0 {
                                    continue;
                                }
                                let kj = (b * len + j) * dim + h * dh;
                                for c in 0..dh {
                                    dq[qi + c] += gij * kv[kj + c];
                                    dk[kj + c] += gij * qv[qi + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
            }
            Op::AddKeyBias { s, bias, heads, ids } => {
                acc(*s, g.to_vec());
                if self.rg(*bias) {
                    let bv = val(*bias);
                    let slots = bv.cols();
                    let len = ids.len();
                    let mut db = vec![0.0; bv.len()];
                    for r in 0..out.rows() {
                        let h = (r / len) % heads;
                        for (j, &id) in ids.iter().enumerate() {
                            db[h * slots + id] += g[r * len + j];
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::AttnApply { p, v, geom } => {
                let AttnGeom { batch, len, heads, dim } = *geom;
                let dh = geom.head_dim();
                let (pv, vv) = (val(*p).data(), val(*v).data());
                let mut dp = vec![0.0; pv.len()];
                let mut dv = vec![0.0; vv.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..len {
                            let prow = ((b * heads + h) * len + i) * len;
                            let gi = (b * len + i) * dim + h * dh;
                            for j in 0..len {
                                let vj = (b * len + j) * dim + h * dh;
                                let w = pv[prow + j];
                                let mut dot = 0.0;
                                for c in 0..dh {
                                    dot += g[gi + c] * vv[vj + c];
                                    dv[vj + c] += w * g[gi + c];
                                }
                                dp[prow + j] = dot;
                            }
                        }
                    }
                }
                acc(*p, dp);
                acc(*v, dv);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = weights.len();
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let w = weights[t] * g[r];
                    let row = &mut dl[r * c..(r + 1) * c];
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w;
                    }
                }
                acc(*logits, dl);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
