//! View-dedicated encoders mapping raw views to `d`-dimensional codes, each
//! finished by a learnable layer normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{dropout, Affine, Conv1d, Ctx, LayerNorm};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;
use crate::views::{ViewKind, ViewSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            layers: 2,
            dropout: 0.2,
            kernel_size: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Config("model.latent_dim must be at least 2".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("model.layers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("model.kernel_size must be odd".into()));
        }
        Ok(())
    }
}

pub fn one_hot(index: i64, cardinality: usize) -> Result<Vec<f64>> {
    if index < 0 || index as usize >= cardinality {
        return Err(Error::CategoryOutOfRange { index, cardinality });
    }
    let mut v = vec![0.0; cardinality];
    v[index as usize] = 1.0;
    Ok(v)
}

/// Turns stored rows (`N × raw_width`) into encoder input: `(N·T) × c` for
/// temporal views, one-hot rows for categorical views.
pub fn prepare_input(spec: &ViewSpec, raw: &Tensor) -> Result<Tensor> {
    if raw.cols() != spec.raw_width() {
        return Err(Error::shape(
            "prepare_input",
            format!(
                "view `{}` expects width {}, got {}",
                spec.id,
                spec.raw_width(),
                raw.cols()
            ),
        ));
    }
    let n = raw.rows();
    match spec.kind {
        ViewKind::Temporal => raw.reshaped(vec![n * spec.steps(), spec.channels()]),
        ViewKind::Static => Ok(raw.clone()),
        ViewKind::Categorical => {
            let card = spec.channels();
            let mut data = Vec::with_capacity(n * card);
            for &v in raw.data() {
                if v.fract() != 0.0 {
                    return Err(Error::CategoryOutOfRange {
                        index: v as i64,
                        cardinality: card,
                    });
                }
                data.extend(one_hot(v as i64, card)?);
            }
            Tensor::matrix(n, card, data)
        }
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    /// Conv1d + ReLU stack, global average pool over time, layer norm.
    Temporal {
        convs: Vec<Conv1d>,
        norm: LayerNorm,
        steps: usize,
        dropout: f64,
    },
    /// Affine + ReLU stack, layer norm.
    Mlp {
        layers: Vec<Affine>,
        norm: LayerNorm,
        dropout: f64,
    },
}

impl Encoder {
    pub fn for_view<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: &ViewSpec,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        match spec.kind {
            ViewKind::Temporal => {
                let mut convs = Vec::with_capacity(cfg.layers);
                let mut c_in = spec.channels();
                for l in 0..cfg.layers {
                    convs.push(Conv1d::new(
                        store,
                        &format!("{name}.conv{l}"),
                        c_in,
                        cfg.latent_dim,
                        cfg.kernel_size,
                        rng,
                    ));
                    c_in = cfg.latent_dim;
                }
                let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.latent_dim);
                Encoder::Temporal {
                    convs,
                    norm,
                    steps: spec.steps(),
                    dropout: cfg.dropout,
                }
            }
            ViewKind::Static | ViewKind::Categorical => Self::mlp(store, name, spec.input_width(), cfg, rng),
        }
    }

    pub fn mlp<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut width = d_in;
        for l in 0..cfg.layers {
            layers.push(Affine::new(store, &format!("{name}.fc{l}"), width, cfg.latent_dim, rng));
            width = cfg.latent_dim;
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.latent_dim);
        Encoder::Mlp {
            layers,
            norm,
            dropout: cfg.dropout,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Encoder::Temporal { norm, .. } | Encoder::Mlp { norm, .. } => norm.dim,
        }
    }

    /// `x` is prepared input (see [`prepare_input`]); output is `B × d`.
    pub fn forward(&self, s: &mut Session, x: Var, ctx: &mut Ctx) -> Result<Var> {
        match self {
            Encoder::Temporal {
                convs,
                norm,
                steps,
                dropout: p,
            } => {
                if s.value(x).rows() == 0 {
                    return Err(Error::InvalidArgument("empty series batch".into()));
                }
                let mut h = x;
                for conv in convs {
                    h = conv.forward(s, h, *steps)?;
                    h = s.graph.relu(h)?;
                    h = dropout(s, h, *p, ctx)?;
                }
                let pooled = s.graph.mean_pool_groups(h, *steps)?;
                norm.forward(s, pooled)
            }
            Encoder::Mlp {
                layers,
                norm,
                dropout: p,
            } => {
                let mut h = x;
                for layer in layers {
                    h = layer.forward(s, h)?;
                    h = s.graph.relu(h)?;
                    h = dropout(s, h, *p, ctx)?;
                }
                norm.forward(s, h)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize) -> EncoderConfig {
        EncoderConfig {
            latent_dim: d,
            layers: 2,
            dropout: 0.0,
            kernel_size: 3,
        }
    }

    #[test]
    fn one_hot_cases() {
        assert_eq!(one_hot(2, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 2).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            one_hot(5, 4),
            Err(Error::CategoryOutOfRange {
                index: 5,
                cardinality: 4
            })
        ));
    }

    #[test]
    fn temporal_output_width_independent_of_length() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for steps in [1, 2, 9] {
            let spec = ViewSpec::temporal("t", steps, 3);
            let mut store = ParamStore::new();
            let enc = Encoder::for_view(&mut store, "e", &spec, &cfg(6), &mut r);
            let raw = Tensor::uniform(&[4, steps * 3], 1.0, &mut r);
            let mut s = Session::new(&store);
            let x = s.constant(prepare_input(&spec, &raw).unwrap());
            let z = enc.forward(&mut s, x, &mut Ctx::eval()).unwrap();
            assert_eq!(s.value(z).shape(), &[4, 6]);
        }
    }

    #[test]
    fn encoded_rows_are_standardized() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let spec = ViewSpec::temporal("t", 5, 2);
        let mut store = ParamStore::new();
        let enc = Encoder::for_view(&mut store, "e", &spec, &cfg(8), &mut r);
        let raw = Tensor::uniform(&[3, 10], 1.0, &mut r);
        let mut s = Session::new(&store);
        let x = s.constant(prepare_input(&spec, &raw).unwrap());
        let z = enc.forward(&mut s, x, &mut Ctx::eval()).unwrap();
        for row in 0..3 {
            let zr = s.value(z).row_slice(row);
            let mean = zr.iter().sum::<f64>() / 8.0;
            let var = zr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_series_is_permutation_invariant_under_constant_kernels() {
        // With constant kernels the convolution of a constant series depends
        // only on how many taps fall inside the series; pooling then averages
        // the same multiset of values regardless of time order.
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let spec = ViewSpec::temporal("t", 6, 2);
        let mut store = ParamStore::new();
        let enc = Encoder::for_view(&mut store, "e", &spec, &cfg(4), &mut r);
        if let Encoder::Temporal { convs, .. } = &enc {
            for conv in convs {
                let shape = store.get(conv.w).shape().to_vec();
                *store.get_mut(conv.w) = Tensor::filled(&shape, 0.3);
            }
        }
        let series: Vec<f64> = (0..6).flat_map(|_| [1.5, -0.5]).collect();
        let mut permuted = Vec::new();
        for t in [3, 0, 5, 1, 4, 2] {
            permuted.extend_from_slice(&series[t * 2..t * 2 + 2]);
        }
        let encode = |data: Vec<f64>| {
            let mut s = Session::new(&store);
            let x = s.constant(prepare_input(&spec, &Tensor::matrix(1, 12, data).unwrap()).unwrap());
            let z = enc.forward(&mut s, x, &mut Ctx::eval()).unwrap();
            s.value(z).clone()
        };
        let a = encode(series);
        let b = encode(permuted);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn static_widths_and_zero_weight_bias_path() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for c in [1, 3, 17] {
            let spec = ViewSpec::fixed("s", c);
            let mut store = ParamStore::new();
            let enc = Encoder::for_view(&mut store, "e", &spec, &cfg(5), &mut r);
            let mut s = Session::new(&store);
            let x = s.constant(Tensor::uniform(&[2, c], 1.0, &mut r));
            let z = enc.forward(&mut s, x, &mut Ctx::eval()).unwrap();
            assert_eq!(s.value(z).shape(), &[2, 5]);
        }

        let spec = ViewSpec::fixed("s", 3);
        let mut store = ParamStore::new();
        let enc = Encoder::for_view(&mut store, "e", &spec, &cfg(4), &mut r);
        let Encoder::Mlp { layers, norm, .. } = &enc else {
            unreachable!()
        };
        for layer in layers {
            let shape = store.get(layer.w).shape().to_vec();
            *store.get_mut(layer.w) = Tensor::zeros(&shape);
        }
        *store.get_mut(layers[1].b) = Tensor::row(vec![1.0, 2.0, 3.0, 6.0]);
        *store.get_mut(norm.shift) = Tensor::row(vec![0.5; 4]);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::uniform(&[1, 3], 1.0, &mut r));
        let z = enc.forward(&mut s, x, &mut Ctx::eval()).unwrap();
        // layer_norm([1,2,3,6]) + 0.5
        let b = [1.0, 2.0, 3.0, 6.0];
        let mean = 3.0;
        let sd = (b.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        for (zv, bv) in s.value(z).data().iter().zip(b) {
            assert!((zv - ((bv - mean) / sd + 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn static_matches_layer_by_layer_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let spec = ViewSpec::fixed("s", 3);
        let mut store = ParamStore::new();
        let enc = Encoder::for_view(&mut store, "e", &spec, &cfg(4), &mut r);
        let Encoder::Mlp { layers, .. } = &enc else {
            unreachable!()
        };
        for layer in layers {
            *store.get_mut(layer.b) = Tensor::uniform(&[1, 4], 0.5, &mut r);
        }
        let x = Tensor::uniform(&[1, 3], 1.0, &mut r);
        let mut s = Session::new(&store);
        let xv = s.constant(x.clone());
        let z = enc.forward(&mut s, xv, &mut Ctx::eval()).unwrap();

        let mut h = x.data().to_vec();
        for layer in layers {
            let (w, b) = (store.get(layer.w), store.get(layer.b));
            h = (0..layer.d_out)
                .map(|o| {
                    let v = b.data()[o] + (0..layer.d_in).map(|i| w.at(o, i) * h[i]).sum::<f64>();
                    v.max(0.0)
                })
                .collect();
        }
        let mean = h.iter().sum::<f64>() / 4.0;
        let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for (zv, hv) in s.value(z).data().iter().zip(&h) {
            assert!((zv - (hv - mean) / (var + crate::nn::LAYER_NORM_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn categorical_input_is_one_hot() {
        let spec = ViewSpec::categorical("lc", 3);
        let raw = Tensor::matrix(2, 1, vec![2.0, 0.0]).unwrap();
        let x = prepare_input(&spec, &raw).unwrap();
        assert_eq!(x.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let bad = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert!(prepare_input(&spec, &bad).is_err());
    }
}
