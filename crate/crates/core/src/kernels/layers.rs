//! Learnable layers with explicit backward rules.
//!
//! Every layer follows the same pattern: `forward` is pure given the
//! [`ParamStore`], `forward_cached` additionally returns what the backward
//! rule needs, and `backward` accumulates parameter gradients into a
//! [`Grads`] buffer and returns the gradient with respect to the input.

use rand::Rng;

use super::{gemm_nt, gemm_tn_acc, Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(d_in)`, zero bias.
    Uniform,
    /// All zeros (weights and bias).
    Zeros,
}

/// `y = x W + b`, with `W: [d_in, d_out]`, `b: [d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, name, d_in, d_out, init, true, rng)
    }

    /// A projection without bias, for uses where a bias would be redundant.
    pub fn new_unbiased(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, name, d_in, d_out, init, false, rng)
    }

    fn build(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!("linear `{name}` with zero width")));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let w: Vec<f64> = match init {
            Init::Uniform => (0..d_in * d_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            Init::Zeros => vec![0.0; d_in * d_out],
        };
        let weight = store.register(format!("{name}.weight"), Tensor::from_parts(vec![d_in, d_out], w))?;
        let bias = if with_bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = ps.value(self.weight);
        let b = self.bias.map(|id| ps.value(id));
        if w.shape() != [self.d_in, self.d_out] || b.is_some_and(|b| b.shape() != [self.d_out]) {
            return Err(Error::dim("linear", "parameter shapes do not match layer"));
        }
        if x.shape().len() != 2 || x.cols() != self.d_in {
            return Err(Error::dim(
                "linear",
                format!("input {:?}, expected [n,{}]", x.shape(), self.d_in),
            ));
        }
        let mut y = x.matmul(w)?;
        let Some(b) = b else {
            return Ok(y);
        };
        let bd = b.data();
        for i in 0..y.rows() {
            for (v, bb) in y.row_mut(i).iter_mut().zip(bd) {
                *v += bb;
            }
        }
        Ok(y)
    }

    /// Accumulates `dW = xᵀ dy`, `db = Σ dy` and returns `dx = dy Wᵀ`.
    pub fn backward(&self, ps: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut Grads) -> Tensor {
        self.backward_params(x, dy, grads);
        gemm_nt(dy, ps.value(self.weight))
    }

    /// Parameter half of [`Linear::backward`], for inputs that are constants.
    pub fn backward_params(&self, x: &Tensor, dy: &Tensor, grads: &mut Grads) {
        gemm_tn_acc(x, dy, grads.get_mut(self.weight).data_mut());
        let Some(bias) = self.bias else {
            return;
        };
        let db = grads.get_mut(bias).data_mut();
        for i in 0..dy.rows() {
            for (g, d) in db.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
    }
}

/// Per-row normalisation followed by a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let scale = store.register(format!("{name}.scale"), Tensor::full(&[dim], 1.0))?;
        let shift = store.register(format!("{name}.shift"), Tensor::zeros(&[dim]))?;
        Ok(Self { scale, shift, dim })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(ps, x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        if x.cols() != self.dim {
            return Err(Error::dim("layer_norm", format!("width {} vs {}", x.cols(), self.dim)));
        }
        let g = ps.value(self.scale).data();
        let b = ps.value(self.shift).data();
        let n = x.rows();
        let d = self.dim as f64;
        let mut normalized = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let nr = normalized.row_mut(i);
            for (o, v) in nr.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let nr = normalized.row(i).to_vec();
            for (k, o) in y.row_mut(i).iter_mut().enumerate() {
                *o = nr[k] * g[k] + b[k];
            }
        }
        Ok((y, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let g = ps.value(self.scale).data();
        let d = self.dim;
        let mut dx = Tensor::zeros(dy.shape());
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for i in 0..dy.rows() {
            let dyr = dy.row(i);
            let xh = cache.normalized.row(i);
            for k in 0..d {
                dg[k] += dyr[k] * xh[k];
                db[k] += dyr[k];
                dxhat[k] = dyr[k] * g[k];
            }
            let sum: f64 = dxhat.iter().sum();
            let dot: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let is = cache.inv_std[i];
            let df = d as f64;
            for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = is / df * (df * dxhat[k] - sum - xh[k] * dot);
            }
        }
        for (a, b) in grads.get_mut(self.scale).data_mut().iter_mut().zip(&dg) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.shift).data_mut().iter_mut().zip(&db) {
            *a += b;
        }
        dx
    }
}

/// Width and post-processing of one MLP layer: `linear -> [layer_norm] -> [relu]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub width: usize,
    pub norm: bool,
    pub relu: bool,
}

impl LayerSpec {
    pub fn hidden(width: usize) -> Self {
        Self { width, norm: false, relu: true }
    }

    pub fn hidden_norm(width: usize) -> Self {
        Self { width, norm: true, relu: true }
    }

    pub fn output(width: usize) -> Self {
        Self { width, norm: false, relu: false }
    }
}

#[derive(Clone, Debug)]
struct MlpLayer {
    linear: Linear,
    norm: Option<LayerNorm>,
    relu: bool,
}

/// Stack of linear layers with optional layer norm and ReLU after each.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Tensor>,
    norms: Vec<Option<LayerNormCache>>,
    activated: Vec<Option<Tensor>>,
}

impl MlpCache {
    pub(crate) fn empty() -> Self {
        Self {
            inputs: Vec::new(),
            norms: Vec::new(),
            activated: Vec::new(),
        }
    }
}

impl Mlp {
    /// `init` applies to the last layer; hidden layers always use uniform init.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        spec: &[LayerSpec],
        last_init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.is_empty() {
            return Err(Error::Config(format!("mlp `{name}` has no layers")));
        }
        let mut layers = Vec::with_capacity(spec.len());
        let mut width = d_in;
        for (i, ls) in spec.iter().enumerate() {
            let init = if i + 1 == spec.len() { last_init } else { Init::Uniform };
            let linear = Linear::new(store, &format!("{name}.{i}"), width, ls.width, init, rng)?;
            let norm = if ls.norm {
                Some(LayerNorm::new(store, &format!("{name}.{i}.norm"), ls.width)?)
            } else {
                None
            };
            layers.push(MlpLayer { linear, norm, relu: ls.relu });
            width = ls.width;
        }
        Ok(Self { layers })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].linear.d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").linear.d_out
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.layers.iter().map(|l| &l.linear)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(ps, x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            norms: Vec::with_capacity(self.layers.len()),
            activated: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = layer.linear.forward(ps, &h)?;
            cache.inputs.push(h);
            match &layer.norm {
                Some(ln) => {
                    let (zn, c) = ln.forward_cached(ps, &z)?;
                    z = zn;
                    cache.norms.push(Some(c));
                }
                None => cache.norms.push(None),
            }
            if layer.relu {
                relu_in_place(&mut z);
                cache.activated.push(Some(z.clone()));
            } else {
                cache.activated.push(None);
            }
            h = z;
        }
        Ok((h, cache))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &MlpCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let mut d = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(act) = &cache.activated[i] {
                relu_backward_in_place(act, &mut d);
            }
            if let (Some(ln), Some(c)) = (&layer.norm, &cache.norms[i]) {
                d = ln.backward(ps, c, &d, grads);
            }
            d = layer.linear.backward(ps, &cache.inputs[i], &d, grads);
        }
        d
    }
}

pub fn relu_in_place(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v <= 0.0 {
            *v = 0.0
        }
    });
}

/// Masks `d` where the ReLU output is zero (subgradient 0 at the kink).
pub fn relu_backward_in_place(activated: &Tensor, d: &mut Tensor) {
    for (g, &a) in d.data_mut().iter_mut().zip(activated.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
