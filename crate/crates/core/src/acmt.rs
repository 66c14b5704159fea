//! Cross-modal transformer layers for object queries.
//!
//! Each layer lets the queries attend to backbone point features (multi-head
//! scaled dot-product attention) and to the image pyramid (deformable
//! sampling around each query's projected reference point). A per-head gate
//! blends the two branch outputs before a shared residual, and a
//! feed-forward block follows. Both sub-blocks normalise their input
//! (pre-norm) so that zero branches leave the queries untouched.
//!
//! Keys, values and image value maps depend only on the scene, so they are
//! computed once per scene as a [`LayerMemory`] and reused by every decoder
//! stage; their gradients are collected in [`MemoryGrads`] and pushed back
//! once.

use rand::Rng;

use crate::backbones::ImagePyramid;
use crate::error::{Error, Result};
use crate::kernels::{
    gemm, softmax_backward_in_place, softmax_in_place, BilinearTaps, Grads, Init, LayerNorm, LayerNormCache, LayerSpec,
    Linear, Mlp, MlpCache, ParamStore, Tensor,
};

pub const HEADS: usize = 4;
/// Sampling points per head and level.
pub const POINTS_PER_LEVEL: usize = 4;

/// A normalised image coordinate in `[0,1]²`, or `None` when the query does
/// not project into the image.
pub type RefPoint = Option<[f64; 2]>;

/// How the two branch outputs are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// Learned per-head softmax weights.
    #[default]
    Gated,
    /// Fixed equal weights; the gate network is bypassed.
    Equal,
}

/// Multi-head cross attention from queries to a key/value memory.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

pub struct CrossAttentionCache {
    q: Tensor,
    probs: Vec<Tensor>,
    attended: Tensor,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
        }
        Ok(Self {
            heads,
            query: Linear::new(store, &format!("{name}.query"), c, c, Init::Uniform, rng)?,
            key: Linear::new_unbiased(store, &format!("{name}.key"), c, c, Init::Uniform, rng)?,
            value: Linear::new(store, &format!("{name}.value"), c, c, Init::Uniform, rng)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, Init::Uniform, rng)?,
        })
    }

    /// Projected keys and values of the memory rows.
    pub fn memory(&self, ps: &ParamStore, memory: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.key.forward(ps, memory)?, self.value.forward(ps, memory)?))
    }

    /// Convenience wrapper that projects the memory and attends in one go.
    pub fn forward(&self, ps: &ParamStore, y: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let (k, v) = self.memory(ps, memory)?;
        Ok(self.attend(ps, y, &k, &v)?.0)
    }

    pub fn attend(&self, ps: &ParamStore, y: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, CrossAttentionCache)> {
        let c = self.query.d_out;
        let (m, n) = (y.rows(), k.rows());
        let d = c / self.heads;
        let q = self.query.forward(ps, y)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut attended = Tensor::zeros(&[m, c]);
        let mut probs = Vec::with_capacity(self.heads);
        let mut head_out = vec![0.0; m * d];
        for h in 0..self.heads {
            let o = h * d;
            let mut s = Tensor::zeros(&[m, n]);
            gemm(m, d, n, &q.data()[o..], (c, 1), &k.data()[o..], (1, c), s.data_mut(), false);
            for i in 0..m {
                let row = s.row_mut(i);
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            gemm(m, n, d, s.data(), (n, 1), &v.data()[o..], (c, 1), &mut head_out, false);
            for i in 0..m {
                attended.row_mut(i)[o..o + d].copy_from_slice(&head_out[i * d..(i + 1) * d]);
            }
            probs.push(s);
        }
        let out = self.out.forward(ps, &attended)?;
        Ok((out, CrossAttentionCache { q, probs, attended }))
    }

    /// Attention weights of one head, `[M, N]`, rows summing to one.
    pub fn weights(cache: &CrossAttentionCache, head: usize) -> &Tensor {
        &cache.probs[head]
    }

    /// Returns `dy`, accumulating key/value gradients into `dk`, `dv`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        ps: &ParamStore,
        y: &Tensor,
        k: &Tensor,
        v: &Tensor,
        cache: &CrossAttentionCache,
        d_out: &Tensor,
        grads: &mut Grads,
        dk: &mut Tensor,
        dv: &mut Tensor,
    ) -> Tensor {
        let c = self.query.d_out;
        let (m, n) = (y.rows(), k.rows());
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let d_att = self.out.backward(ps, &cache.attended, d_out, grads);
        let mut dq = Tensor::zeros(&[m, c]);
        let mut tmp_nd = vec![0.0; n * d];
        let mut tmp_md = vec![0.0; m * d];
        for h in 0..self.heads {
            let o = h * d;
            let p = &cache.probs[h];
            // dV_h = Pᵀ dO_h
            gemm(n, m, d, p.data(), (1, n), &d_att.data()[o..], (c, 1), &mut tmp_nd, false);
            for j in 0..n {
                for (a, b) in dv.row_mut(j)[o..o + d].iter_mut().zip(&tmp_nd[j * d..(j + 1) * d]) {
                    *a += b;
                }
            }
            // dP = dO_h V_hᵀ
            let mut ds = Tensor::zeros(&[m, n]);
            gemm(m, d, n, &d_att.data()[o..], (c, 1), &v.data()[o..], (1, c), ds.data_mut(), false);
            for i in 0..m {
                let row = ds.row_mut(i);
                softmax_backward_in_place(p.row(i), row);
                row.iter_mut().for_each(|x| *x *= scale);
            }
            // dQ_h = dS K_h, dK_h = dSᵀ Q_h
            gemm(m, n, d, ds.data(), (n, 1), &k.data()[o..], (c, 1), &mut tmp_md, false);
            for i in 0..m {
                dq.row_mut(i)[o..o + d].copy_from_slice(&tmp_md[i * d..(i + 1) * d]);
            }
            gemm(n, m, d, ds.data(), (1, n), &cache.q.data()[o..], (c, 1), &mut tmp_nd, false);
            for j in 0..n {
                for (a, b) in dk.row_mut(j)[o..o + d].iter_mut().zip(&tmp_nd[j * d..(j + 1) * d]) {
                    *a += b;
                }
            }
        }
        self.query.backward(ps, y, &dq, grads)
    }
}

/// Multi-scale deformable attention over an image pyramid.
#[derive(Clone, Debug)]
pub struct MsDeformAttention {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub offsets: Linear,
    pub weights: Linear,
    pub values: Vec<Linear>,
    pub out: Linear,
}

pub struct DeformCache {
    valid: Vec<bool>,
    taps: Vec<BilinearTaps>,
    probs: Tensor,
    samples: Tensor,
    aggregated: Tensor,
    sizes: Vec<(usize, usize)>,
}

impl MsDeformAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        c_img: usize,
        heads: usize,
        levels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
        }
        let slots = heads * levels * POINTS_PER_LEVEL;
        Ok(Self {
            heads,
            levels,
            points: POINTS_PER_LEVEL,
            offsets: Linear::new(store, &format!("{name}.offsets"), c, 2 * slots, Init::Zeros, rng)?,
            weights: Linear::new(store, &format!("{name}.weights"), c, slots, Init::Uniform, rng)?,
            values: (0..levels)
                .map(|l| Linear::new(store, &format!("{name}.value{l}"), c_img, c, Init::Uniform, rng))
                .collect::<Result<_>>()?,
            out: Linear::new(store, &format!("{name}.out"), c, c, Init::Uniform, rng)?,
        })
    }

    fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    /// Projects every pyramid level to the query width, `[H_l, W_l, C]`.
    pub fn value_maps(&self, ps: &ParamStore, pyramid: &ImagePyramid) -> Result<Vec<Tensor>> {
        if pyramid.levels.len() != self.levels {
            return Err(Error::dim("ms_deform_attention", "pyramid level count"));
        }
        pyramid
            .levels
            .iter()
            .zip(&self.values)
            .map(|(lvl, lin)| {
                let s = lvl.shape();
                let flat = lvl.clone().reshape(&[s[0] * s[1], s[2]])?;
                lin.forward(ps, &flat)?.reshape(&[s[0], s[1], lin.d_out])
            })
            .collect()
    }

    pub fn value_maps_backward(
        &self,
        ps: &ParamStore,
        pyramid: &ImagePyramid,
        d_maps: &[Tensor],
        grads: &mut Grads,
    ) -> Vec<Tensor> {
        pyramid
            .levels
            .iter()
            .zip(&self.values)
            .zip(d_maps)
            .map(|((lvl, lin), dm)| {
                let s = lvl.shape();
                let flat = Tensor::from_parts(vec![s[0] * s[1], s[2]], lvl.data().to_vec());
                let dflat = Tensor::from_parts(vec![s[0] * s[1], lin.d_out], dm.data().to_vec());
                let dx = lin.backward(ps, &flat, &dflat, grads);
                Tensor::from_parts(s.to_vec(), dx.into_data())
            })
            .collect()
    }

    /// Convenience wrapper computing the value maps and sampling in one go.
    pub fn forward(&self, ps: &ParamStore, y: &Tensor, refs: &[RefPoint], pyramid: &ImagePyramid) -> Result<Tensor> {
        let maps = self.value_maps(ps, pyramid)?;
        Ok(self.sample(ps, y, refs, &maps)?.0)
    }

    pub fn sample(&self, ps: &ParamStore, y: &Tensor, refs: &[RefPoint], maps: &[Tensor]) -> Result<(Tensor, DeformCache)> {
        let m = y.rows();
        if refs.len() != m {
            return Err(Error::dim("ms_deform_attention", "one reference point per query"));
        }
        let c = self.out.d_in;
        let d = c / self.heads;
        let (lv, np) = (self.levels, self.points);
        let slots = self.slots();
        let offsets = self.offsets.forward(ps, y)?;
        let mut probs = self.weights.forward(ps, y)?;
        let sizes: Vec<(usize, usize)> = maps.iter().map(|t| (t.shape()[0], t.shape()[1])).collect();
        let valid: Vec<bool> = refs.iter().map(|r| r.is_some()).collect();
        let mut taps = Vec::with_capacity(m * slots);
        let mut samples = Tensor::zeros(&[m, slots * d]);
        let mut aggregated = Tensor::zeros(&[m, c]);
        for i in 0..m {
            let pr = probs.row_mut(i);
            for h in 0..self.heads {
                softmax_in_place(&mut pr[h * lv * np..(h + 1) * lv * np]);
            }
            let r = refs[i].unwrap_or([-1.0, -1.0]);
            let off = offsets.row(i);
            for h in 0..self.heads {
                for l in 0..lv {
                    let (hl, wl) = sizes[l];
                    for p in 0..np {
                        let s = (h * lv + l) * np + p;
                        let t = if refs[i].is_some() {
                            let u = r[0] + off[2 * s] / wl as f64;
                            let v = r[1] + off[2 * s + 1] / hl as f64;
                            BilinearTaps::new(hl, wl, u, v)
                        } else {
                            BilinearTaps::new(1, 1, -1.0, -1.0)
                        };
                        t.sample(maps[l].data(), c, h * d, &mut samples.row_mut(i)[s * d..(s + 1) * d]);
                        taps.push(t);
                    }
                }
            }
            if refs[i].is_some() {
                let pr = probs.row(i).to_vec();
                let sr = samples.row(i).to_vec();
                let ar = aggregated.row_mut(i);
                for h in 0..self.heads {
                    for lp in 0..lv * np {
                        let s = h * lv * np + lp;
                        for (a, x) in ar[h * d..(h + 1) * d].iter_mut().zip(&sr[s * d..(s + 1) * d]) {
                            *a += pr[s] * x;
                        }
                    }
                }
            }
        }
        let mut out = self.out.forward(ps, &aggregated)?;
        for (i, ok) in valid.iter().enumerate() {
            if !ok {
                out.row_mut(i).fill(0.0);
            }
        }
        Ok((
            out,
            DeformCache {
                valid,
                taps,
                probs,
                samples,
                aggregated,
                sizes,
            },
        ))
    }

    /// Normalised sampling weights, `[M, H·L·P]`.
    pub fn sampling_weights(cache: &DeformCache) -> &Tensor {
        &cache.probs
    }

    /// Returns `dy`, accumulating value-map gradients into `d_maps`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        ps: &ParamStore,
        y: &Tensor,
        maps: &[Tensor],
        cache: &DeformCache,
        d_out: &Tensor,
        grads: &mut Grads,
        d_maps: &mut [Tensor],
    ) -> Tensor {
        let m = y.rows();
        let c = self.out.d_in;
        let d = c / self.heads;
        let (lv, np) = (self.levels, self.points);
        let slots = self.slots();
        let mut d_out = d_out.clone();
        for (i, ok) in cache.valid.iter().enumerate() {
            if !ok {
                d_out.row_mut(i).fill(0.0);
            }
        }
        let d_agg = self.out.backward(ps, &cache.aggregated, &d_out, grads);
        let mut d_offsets = Tensor::zeros(&[m, 2 * slots]);
        let mut d_logits = Tensor::zeros(&[m, slots]);
        let mut buf = vec![0.0; d];
        for i in 0..m {
            if !cache.valid[i] {
                continue;
            }
            let da = d_agg.row(i);
            let pr = cache.probs.row(i);
            let sr = cache.samples.row(i);
            let dl = d_logits.row_mut(i);
            for h in 0..self.heads {
                let dah = &da[h * d..(h + 1) * d];
                for l in 0..lv {
                    let (hl, wl) = cache.sizes[l];
                    for p in 0..np {
                        let s = (h * lv + l) * np + p;
                        dl[s] = sr[s * d..(s + 1) * d].iter().zip(dah).map(|(a, b)| a * b).sum();
                        buf.iter_mut().zip(dah).for_each(|(b, g)| *b = pr[s] * g);
                        let t = &cache.taps[i * slots + s];
                        let (du, dv) = t.backward(maps[l].data(), c, h * d, &buf, Some(d_maps[l].data_mut()));
                        let dof = d_offsets.row_mut(i);
                        dof[2 * s] = du / wl as f64;
                        dof[2 * s + 1] = dv / hl as f64;
                    }
                }
                softmax_backward_in_place(&pr[h * lv * np..(h + 1) * lv * np], &mut dl[h * lv * np..(h + 1) * lv * np]);
            }
        }
        let mut dy = self.offsets.backward(ps, y, &d_offsets, grads);
        dy.add_assign(&self.weights.backward(ps, y, &d_logits, grads));
        dy
    }
}

/// Per-head soft selection between the point and image branch.
#[derive(Clone, Debug)]
pub struct CrossModalGate {
    pub heads: usize,
    mlp: Mlp,
}

pub struct GateCache {
    input: Option<MlpCache>,
    lambda_p: Vec<f64>,
}

impl CrossModalGate {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let mlp = Mlp::new(
            store,
            name,
            3 * c,
            &[LayerSpec::hidden_norm(c), LayerSpec::output(2 * heads)],
            Init::Zeros,
            rng,
        )?;
        Ok(Self { heads, mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// `λ_p` per query and head from raw logits laid out as
    /// `[p_0..p_{H−1}, i_0..i_{H−1}]`; `λ_i = 1 − λ_p`.
    pub fn weights_from_logits(logits: &[f64], heads: usize) -> Vec<f64> {
        (0..heads)
            .map(|h| {
                let mut pair = [logits[h], logits[heads + h]];
                softmax_in_place(&mut pair);
                pair[0]
            })
            .collect()
    }

    /// Fused `λ_p ⊙ y^p + λ_i ⊙ y^i` and the `(λ_p, λ_i)` pairs per query and head.
    pub fn forward(
        &self,
        ps: &ParamStore,
        y: &Tensor,
        yp: &Tensor,
        yi: &Tensor,
        mode: FusionMode,
    ) -> Result<(Tensor, GateCache)> {
        let (m, c) = (y.rows(), y.cols());
        let d = c / self.heads;
        let (lambda_p, input) = match mode {
            FusionMode::Equal => (vec![0.5; m * self.heads], None),
            FusionMode::Gated => {
                let x = Tensor::hcat(&[y, yp, yi])?;
                let (logits, cache) = self.mlp.forward_cached(ps, &x)?;
                let lp = (0..m)
                    .flat_map(|i| Self::weights_from_logits(logits.row(i), self.heads))
                    .collect();
                (lp, Some(cache))
            }
        };
        let mut out = Tensor::zeros(&[m, c]);
        for i in 0..m {
            let (pr, ir) = (yp.row(i), yi.row(i));
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                let lp = lambda_p[i * self.heads + k / d];
                *o = lp * pr[k] + (1.0 - lp) * ir[k];
            }
        }
        Ok((out, GateCache { input, lambda_p }))
    }

    /// `(λ_p, λ_i)` for query `i`, head `h`.
    pub fn lambdas(cache: &GateCache, i: usize, h: usize, heads: usize) -> (f64, f64) {
        let lp = cache.lambda_p[i * heads + h];
        (lp, 1.0 - lp)
    }

    /// Returns gradients for `(y, y^p, y^i)`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        yp: &Tensor,
        yi: &Tensor,
        cache: &GateCache,
        d_out: &Tensor,
        grads: &mut Grads,
    ) -> (Tensor, Tensor, Tensor) {
        let (m, c) = (yp.rows(), yp.cols());
        let hh = self.heads;
        let d = c / hh;
        let mut dyp = Tensor::zeros(&[m, c]);
        let mut dyi = Tensor::zeros(&[m, c]);
        let mut d_logits = Tensor::zeros(&[m, 2 * hh]);
        for i in 0..m {
            let g = d_out.row(i);
            let (pr, ir) = (yp.row(i), yi.row(i));
            for h in 0..hh {
                let lp = cache.lambda_p[i * hh + h];
                let mut dlp = 0.0;
                for k in h * d..(h + 1) * d {
                    dyp.row_mut(i)[k] = lp * g[k];
                    dyi.row_mut(i)[k] = (1.0 - lp) * g[k];
                    dlp += g[k] * (pr[k] - ir[k]);
                }
                // λ_p = σ(p − i): ∂/∂p = λ_p λ_i, ∂/∂i = −λ_p λ_i
                let s = dlp * lp * (1.0 - lp);
                d_logits.row_mut(i)[h] = s;
                d_logits.row_mut(i)[hh + h] = -s;
            }
        }
        match &cache.input {
            None => (Tensor::zeros(&[m, c]), dyp, dyi),
            Some(mc) => {
                let dx = self.mlp.backward(ps, mc, &d_logits, grads);
                let mut parts = dx.hsplit(&[c, c, c]).into_iter();
                let dy = parts.next().unwrap();
                dyp.add_assign(&parts.next().unwrap());
                dyi.add_assign(&parts.next().unwrap());
                (dy, dyp, dyi)
            }
        }
    }
}

/// Scene-dependent inputs of one layer, shared by all decoder stages.
#[derive(Clone, Debug)]
pub struct LayerMemory {
    pub keys: Tensor,
    pub values: Tensor,
    pub value_maps: Vec<Tensor>,
}

/// Gradients with respect to a [`LayerMemory`].
#[derive(Clone, Debug)]
pub struct MemoryGrads {
    pub keys: Tensor,
    pub values: Tensor,
    pub value_maps: Vec<Tensor>,
}

impl MemoryGrads {
    pub fn zeros_like(mem: &LayerMemory) -> Self {
        Self {
            keys: Tensor::zeros_like(&mem.keys),
            values: Tensor::zeros_like(&mem.values),
            value_maps: mem.value_maps.iter().map(Tensor::zeros_like).collect(),
        }
    }
}

/// One cross-modal transformer layer.
#[derive(Clone, Debug)]
pub struct AcmtLayer {
    pub norm1: LayerNorm,
    pub cross: CrossAttention,
    pub deform: MsDeformAttention,
    pub gate: CrossModalGate,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

pub struct AcmtLayerCache {
    n1: LayerNormCache,
    yhat: Tensor,
    cross: CrossAttentionCache,
    yp: Tensor,
    deform: DeformCache,
    yi: Tensor,
    gate: GateCache,
    n2: LayerNormCache,
    ffn: MlpCache,
}

impl AcmtLayerCache {
    pub fn gate(&self) -> &GateCache {
        &self.gate
    }

    pub fn deform(&self) -> &DeformCache {
        &self.deform
    }
}

impl AcmtLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        c_img: usize,
        heads: usize,
        levels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            cross: CrossAttention::new(store, &format!("{name}.cross"), c, heads, rng)?,
            deform: MsDeformAttention::new(store, &format!("{name}.deform"), c, c_img, heads, levels, rng)?,
            gate: CrossModalGate::new(store, &format!("{name}.gate"), c, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                c,
                &[LayerSpec::hidden(2 * c), LayerSpec::output(c)],
                Init::Uniform,
                rng,
            )?,
        })
    }

    pub fn memory(&self, ps: &ParamStore, points: &Tensor, pyramid: &ImagePyramid) -> Result<LayerMemory> {
        let (keys, values) = self.cross.memory(ps, points)?;
        Ok(LayerMemory {
            keys,
            values,
            value_maps: self.deform.value_maps(ps, pyramid)?,
        })
    }

    /// Pushes memory gradients back to the point features and pyramid levels.
    pub fn memory_backward(
        &self,
        ps: &ParamStore,
        points: &Tensor,
        pyramid: &ImagePyramid,
        mg: &MemoryGrads,
        grads: &mut Grads,
    ) -> (Tensor, Vec<Tensor>) {
        let mut d_points = self.cross.key.backward(ps, points, &mg.keys, grads);
        d_points.add_assign(&self.cross.value.backward(ps, points, &mg.values, grads));
        let d_levels = self.deform.value_maps_backward(ps, pyramid, &mg.value_maps, grads);
        (d_points, d_levels)
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        y: &Tensor,
        refs: &[RefPoint],
        mem: &LayerMemory,
        mode: FusionMode,
    ) -> Result<(Tensor, AcmtLayerCache)> {
        let (yhat, n1) = self.norm1.forward_cached(ps, y)?;
        let (yp, cross) = self.cross.attend(ps, &yhat, &mem.keys, &mem.values)?;
        let (yi, deform) = self.deform.sample(ps, &yhat, refs, &mem.value_maps)?;
        let (fused, gate) = self.gate.forward(ps, &yhat, &yp, &yi, mode)?;
        let mut mid = y.clone();
        mid.add_assign(&fused);
        let (z, n2) = self.norm2.forward_cached(ps, &mid)?;
        let (f, ffn) = self.ffn.forward_cached(ps, &z)?;
        let mut out = mid;
        out.add_assign(&f);
        Ok((
            out,
            AcmtLayerCache {
                n1,
                yhat,
                cross,
                yp,
                deform,
                yi,
                gate,
                n2,
                ffn,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &AcmtLayerCache,
        mem: &LayerMemory,
        d_out: &Tensor,
        grads: &mut Grads,
        mg: &mut MemoryGrads,
    ) -> Tensor {
        let dz = self.ffn.backward(ps, &cache.ffn, d_out, grads);
        let mut d_mid = d_out.clone();
        d_mid.add_assign(&self.norm2.backward(ps, &cache.n2, &dz, grads));
        let (mut d_yhat, dyp, dyi) = self.gate.backward(ps, &cache.yp, &cache.yi, &cache.gate, &d_mid, grads);
        d_yhat.add_assign(&self.cross.backward(
            ps,
            &cache.yhat,
            &mem.keys,
            &mem.values,
            &cache.cross,
            &dyp,
            grads,
            &mut mg.keys,
            &mut mg.values,
        ));
        d_yhat.add_assign(&self.deform.backward(
            ps,
            &cache.yhat,
            &mem.value_maps,
            &cache.deform,
            &dyi,
            grads,
            &mut mg.value_maps,
        ));
        let mut dy = d_mid;
        dy.add_assign(&self.norm1.backward(ps, &cache.n1, &d_yhat, grads));
        dy
    }
}

/// A stack of layers applied in sequence.
#[derive(Clone, Debug)]
pub struct Acmt {
    pub layers: Vec<AcmtLayer>,
}

impl Acmt {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_layers: usize,
        c: usize,
        c_img: usize,
        heads: usize,
        levels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| AcmtLayer::new(store, &format!("{name}.{i}"), c, c_img, heads, levels, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn memory(&self, ps: &ParamStore, points: &Tensor, pyramid: &ImagePyramid) -> Result<Vec<LayerMemory>> {
        self.layers.iter().map(|l| l.memory(ps, points, pyramid)).collect()
    }

    pub fn memory_grads(mem: &[LayerMemory]) -> Vec<MemoryGrads> {
        mem.iter().map(MemoryGrads::zeros_like).collect()
    }

    /// Returns gradients for the point features and each pyramid level.
    pub fn memory_backward(
        &self,
        ps: &ParamStore,
        points: &Tensor,
        pyramid: &ImagePyramid,
        mg: &[MemoryGrads],
        grads: &mut Grads,
    ) -> (Tensor, Vec<Tensor>) {
        let mut d_points = Tensor::zeros_like(points);
        let mut d_levels: Vec<Tensor> = pyramid.levels.iter().map(Tensor::zeros_like).collect();
        for (layer, g) in self.layers.iter().zip(mg) {
            let (dp, dl) = layer.memory_backward(ps, points, pyramid, g, grads);
            d_points.add_assign(&dp);
            for (a, b) in d_levels.iter_mut().zip(&dl) {
                a.add_assign(b);
            }
        }
        (d_points, d_levels)
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        y: &Tensor,
        refs: &[RefPoint],
        mem: &[LayerMemory],
        mode: FusionMode,
    ) -> Result<(Tensor, Vec<AcmtLayerCache>)> {
        let mut y = y.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, m) in self.layers.iter().zip(mem) {
            let (out, c) = layer.forward(ps, &y, refs, m, mode)?;
            y = out;
            caches.push(c);
        }
        Ok((y, caches))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        caches: &[AcmtLayerCache],
        mem: &[LayerMemory],
        d_out: &Tensor,
        grads: &mut Grads,
        mg: &mut [MemoryGrads],
    ) -> Tensor {
        let mut d = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(ps, &caches[i], &mem[i], &d, grads, &mut mg[i]);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::kernels::bilinear_sample;

    fn identity(ps: &mut ParamStore, lin: &Linear) {
        let n = lin.d_in;
        let mut w = Tensor::zeros(&[n, lin.d_out]);
        for i in 0..n.min(lin.d_out) {
            w.row_mut(i)[i] = 1.0;
        }
        ps.set_value(lin.weight, w).unwrap();
        ps.set_value(lin.bias.unwrap(), Tensor::zeros(&[lin.d_out])).unwrap();
    }

    fn zero(ps: &mut ParamStore, lin: &Linear) {
        ps.set_value(lin.weight, Tensor::zeros(&[lin.d_in, lin.d_out])).unwrap();
        if let Some(b) = lin.bias {
            ps.set_value(b, Tensor::zeros(&[lin.d_out])).unwrap();
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pyramid(rng: &mut ChaCha8Rng, c: usize) -> ImagePyramid {
        ImagePyramid {
            levels: [8, 4, 2, 1].iter().map(|&s| rand_tensor(rng, &[s, s + 1, c])).collect(),
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let ca = CrossAttention::new(&mut ps, "ca", 8, 4, &mut rng).unwrap();
        identity(&mut ps, &ca.value);
        identity(&mut ps, &ca.out);
        let y = rand_tensor(&mut rng, &[5, 8]);
        let x = rand_tensor(&mut rng, &[1, 8]);
        let out = ca.forward(&ps, &y, &x).unwrap();
        for i in 0..5 {
            for k in 0..8 {
                assert!((out.row(i)[k] - x.data()[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let ca = CrossAttention::new(&mut ps, "ca", 8, 4, &mut rng).unwrap();
        let y = rand_tensor(&mut rng, &[5, 8]);
        let x = rand_tensor(&mut rng, &[7, 8]);
        let (k, v) = ca.memory(&ps, &x).unwrap();
        let (_, cache) = ca.attend(&ps, &y, &k, &v).unwrap();
        for h in 0..4 {
            let p = CrossAttention::weights(&cache, h);
            for i in 0..5 {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deformable_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let c = 8;
        let da = MsDeformAttention::new(&mut ps, "da", c, c, 4, 4, &mut rng).unwrap();
        zero(&mut ps, &da.weights);
        for v in &da.values {
            identity(&mut ps, v);
        }
        identity(&mut ps, &da.out);
        let pyr = pyramid(&mut rng, c);
        let y = rand_tensor(&mut rng, &[3, c]);
        let refs = vec![Some([0.3, 0.7]), None, Some([1.0, 0.0])];
        let out = da.forward(&ps, &y, &refs, &pyr).unwrap();
        for (i, r) in refs.iter().enumerate() {
            match r {
                None => assert!(out.row(i).iter().all(|&v| v == 0.0)),
                Some(r) => {
                    let mut mean = vec![0.0; c];
                    for lvl in &pyr.levels {
                        for (m, s) in mean.iter_mut().zip(bilinear_sample(lvl, (r[0], r[1]))) {
                            *m += s / 4.0;
                        }
                    }
                    for k in 0..c {
                        assert!((out.row(i)[k] - mean[k]).abs() < 1e-10);
                    }
                }
            }
        }

        // one-hot weight mass on (level 2, point 1) for every head
        let slots = 4 * 4 * POINTS_PER_LEVEL;
        let mut b = Tensor::zeros(&[slots]);
        for h in 0..4 {
            b.data_mut()[(h * 4 + 2) * POINTS_PER_LEVEL + 1] = 1000.0;
        }
        ps.set_value(da.weights.bias.unwrap(), b).unwrap();
        let out = da.forward(&ps, &y, &refs, &pyr).unwrap();
        let expect = bilinear_sample(&pyr.levels[2], (0.3, 0.7));
        for k in 0..c {
            assert!((out.row(0)[k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_cases() {
        let l = CrossModalGate::weights_from_logits(&[0.3, 1.0, 0.3, -19.0], 2);
        assert_eq!(l[0], 0.5);
        assert!(l[1] > 0.9999);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let gate = CrossModalGate::new(&mut ps, "g", 8, 4, &mut rng).unwrap();
        let (y, yp, yi) = (
            rand_tensor(&mut rng, &[3, 8]),
            rand_tensor(&mut rng, &[3, 8]),
            rand_tensor(&mut rng, &[3, 8]),
        );
        // fresh gate: zero last layer, equal logits
        let (f, _) = gate.forward(&ps, &y, &yp, &yi, FusionMode::Gated).unwrap();
        for (k, v) in f.data().iter().enumerate() {
            assert!((v - 0.5 * (yp.data()[k] + yi.data()[k])).abs() < 1e-15);
        }
        for id in ps.ids().collect::<Vec<_>>() {
            let t = rand_tensor(&mut rng, ps.value(id).shape());
            ps.set_value(id, t).unwrap();
        }
        let (_, cache) = gate.forward(&ps, &y, &yp, &yi, FusionMode::Gated).unwrap();
        for i in 0..3 {
            for h in 0..4 {
                let (a, b) = CrossModalGate::lambdas(&cache, i, h, 4);
                assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_branches_leave_queries_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let (c, ci) = (8, 4);
        let layer = AcmtLayer::new(&mut ps, "l", c, ci, 4, 4, &mut rng).unwrap();
        zero(&mut ps, &layer.cross.value);
        zero(&mut ps, &layer.cross.out);
        for v in &layer.deform.values {
            zero(&mut ps, v);
        }
        zero(&mut ps, &layer.deform.out);
        zero(&mut ps, layer.ffn.linears().last().unwrap());
        let pyr = pyramid(&mut rng, ci);
        let x = rand_tensor(&mut rng, &[10, c]);
        let mem = layer.memory(&ps, &x, &pyr).unwrap();
        for m in [1, 64] {
            let y = rand_tensor(&mut rng, &[m, c]);
            let refs: Vec<RefPoint> = (0..m).map(|i| (i % 3 != 0).then_some([0.4, 0.6])).collect();
            let (out, _) = layer.forward(&ps, &y, &refs, &mem, FusionMode::Gated).unwrap();
            assert_eq!(out, y);
        }
    }
}
