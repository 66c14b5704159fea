//! Graph reasoning over proposals.
//!
//! Proposal features are first re-estimated from nearby backbone points by
//! masked inverse-distance weighting. Those node features drive an
//! attention graph convolution on k-NN graphs at three neighborhood scales,
//! where each edge is weighted by a softmax over cosine query/key
//! similarity times a Gaussian of the edge length. The per-scale
//! aggregates are fused by an MLP and added back to the input features
//! through a learnable scalar gate that starts at zero.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry3d::{distance, sub, Vec3};
use crate::kernels::{
    cosine_sim, cosine_sim_backward, softmax_backward_in_place, softmax_in_place, Grads, Init, LayerSpec, Linear,
    Mlp, MlpCache, ParamId, ParamStore, Tensor,
};

pub const DEFAULT_SCALES: [usize; 3] = [5, 10, 20];
/// Backbone points gathered around each proposal for the IDW step.
pub const IDW_NEIGHBORS: usize = 16;

/// Mean of non-negative values, summed in sorted order so the result does
/// not depend on input order.
fn order_free_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Exact k-NN among proposals for every scale; neighbor lists are sorted
/// by distance (ties to the lower index) and never contain the node itself.
#[derive(Clone, Debug)]
pub struct KnnGraph {
    pub scales: Vec<usize>,
    /// Up to `max(scales)` nearest neighbors per node.
    pub neighbors: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
    /// Per scale: mean distance to the `k_s`-th neighbor.
    pub sigmas: Vec<f64>,
}

impl KnnGraph {
    pub fn build(coords: &[Vec3], scales: &[usize]) -> Result<Self> {
        let m = coords.len();
        if m < 2 {
            return Err(Error::Input(format!("k-NN graph needs at least 2 nodes, got {m}")));
        }
        if scales.is_empty() || scales.contains(&0) {
            return Err(Error::Config(format!("invalid neighborhood scales {scales:?}")));
        }
        let kmax = scales.iter().copied().max().unwrap_or(1).min(m - 1);
        let mut neighbors = Vec::with_capacity(m);
        let mut distances = Vec::with_capacity(m);
        for i in 0..m {
            let mut cand: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (distance(coords[i], coords[j]), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(kmax);
            distances.push(cand.iter().map(|c| c.0).collect());
            neighbors.push(cand.into_iter().map(|c| c.1).collect());
        }
        let mut graph = Self {
            scales: scales.to_vec(),
            neighbors,
            distances,
            sigmas: Vec::new(),
        };
        graph.sigmas = (0..scales.len())
            .map(|s| {
                let k = graph.scale_len(s);
                let d: Vec<f64> = graph.distances.iter().map(|row| row[k - 1]).collect();
                order_free_mean(d).max(1e-9)
            })
            .collect();
        Ok(graph)
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// `|N_s(i)| = min(k_s, M − 1)`.
    pub fn scale_len(&self, s: usize) -> usize {
        self.scales[s].min(self.num_nodes() - 1)
    }
}

pub fn knn_graph(coords: &[Vec3], scales: &[usize]) -> Result<KnnGraph> {
    KnnGraph::build(coords, scales)
}

/// `ζ_ij` for every (proposal, neighbor point) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMask(pub Vec<Vec<bool>>);

/// Backbone points around each proposal with the IDW bandwidth and mask.
#[derive(Clone, Debug)]
pub struct IdwNeighborhood {
    pub neighbors: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
    /// Mean proposal-to-point k-NN distance.
    pub sigma: f64,
    pub mask: BoundaryMask,
}

impl IdwNeighborhood {
    /// Gathers the `k` nearest points of every proposal. A pair is unmasked
    /// when its distance is at most `2σ`.
    pub fn build(coords: &[Vec3], points: &[Vec3], k: usize) -> Self {
        let k = k.min(points.len());
        let mut neighbors = Vec::with_capacity(coords.len());
        let mut distances = Vec::with_capacity(coords.len());
        for c in coords {
            let mut cand: Vec<(f64, usize)> = points.iter().enumerate().map(|(j, p)| (distance(*c, *p), j)).collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            distances.push(cand.iter().map(|c| c.0).collect::<Vec<_>>());
            neighbors.push(cand.into_iter().map(|c| c.1).collect());
        }
        let sigma = order_free_mean(distances.iter().flatten().copied().collect()).max(1e-9);
        let mask = BoundaryMask(
            distances
                .iter()
                .map(|row| row.iter().map(|&d| d <= 2.0 * sigma).collect())
                .collect(),
        );
        Self {
            neighbors,
            distances,
            sigma,
            mask,
        }
    }

    /// Normalised weights `ζ w / Σ ζ w` per proposal, or `None` when every
    /// neighbor is masked out.
    pub fn weights(&self) -> Vec<Option<Vec<f64>>> {
        self.distances
            .iter()
            .zip(&self.mask.0)
            .map(|(d, z)| {
                let raw: Vec<f64> = d
                    .iter()
                    .zip(z)
                    .map(|(&d, &z)| if z { (-d / self.sigma).exp() } else { 0.0 })
                    .collect();
                let total: f64 = raw.iter().sum();
                (total > 0.0).then(|| raw.iter().map(|w| w / total).collect())
            })
            .collect()
    }
}

/// Masked inverse-distance aggregation of point features; rows whose mask
/// is empty keep their `prior` feature. Also returns which rows fell back.
pub fn idw_aggregate(nb: &IdwNeighborhood, point_features: &Tensor, prior: &Tensor) -> (Tensor, Vec<bool>) {
    let c = prior.cols();
    let mut out = prior.clone();
    let mut fallback = Vec::with_capacity(prior.rows());
    for (i, w) in nb.weights().into_iter().enumerate() {
        match w {
            Some(w) => {
                let row = out.row_mut(i);
                row.iter_mut().for_each(|v| *v = 0.0);
                for (&j, wj) in nb.neighbors[i].iter().zip(&w) {
                    for (o, f) in row.iter_mut().zip(&point_features.row(j)[..c]) {
                        *o += wj * f;
                    }
                }
                fallback.push(false);
            }
            None => fallback.push(true),
        }
    }
    (out, fallback)
}

/// Per-scale attention weights for one node: `(neighbor, α, w)`.
pub type ScaleWeights = Vec<(usize, f64, f64)>;

/// Learnable parts of the graph reasoning module.
#[derive(Clone, Debug)]
pub struct Grm {
    pub channels: usize,
    edge: Mlp,
    queries: Vec<Linear>,
    keys: Vec<Linear>,
    transforms: Vec<Linear>,
    fusion: Mlp,
    pub gamma: ParamId,
}

struct SlotCache {
    k: usize,
    edge_rows: Vec<usize>,
    edge_feats: Tensor,
    transformed: Tensor,
    q: Tensor,
    key: Tensor,
    alpha: Vec<f64>,
    gauss: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct GrmCache {
    degenerate: bool,
    nodes: Tensor,
    fallback: Vec<bool>,
    idw_weights: Vec<Option<Vec<f64>>>,
    idw_neighbors: Vec<Vec<usize>>,
    n_points: usize,
    graph: KnnGraph,
    offsets: Vec<usize>,
    edge_in: Tensor,
    edge_cache: MlpCache,
    slots: Vec<SlotCache>,
    active: [bool; 3],
    fusion_in_cache: MlpCache,
    fused: Tensor,
    gamma: f64,
}

/// Output of [`Grm::forward`].
pub struct GrmOutput {
    pub features: Tensor,
    /// Set when the graph is degenerate (a single proposal) and the input
    /// was passed through unchanged.
    pub degenerate: bool,
}

impl Grm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = channels;
        let edge = Mlp::new(store, &format!("{name}.edge"), 2 * c + 3, &[LayerSpec::hidden(c)], Init::Uniform, rng)?;
        let mut queries = Vec::new();
        let mut keys = Vec::new();
        let mut transforms = Vec::new();
        for s in 0..DEFAULT_SCALES.len() {
            queries.push(Linear::new(store, &format!("{name}.scale{s}.query"), c, c, Init::Uniform, rng)?);
            keys.push(Linear::new(store, &format!("{name}.scale{s}.key"), c, c, Init::Uniform, rng)?);
            transforms.push(Linear::new(store, &format!("{name}.scale{s}.transform"), c, c, Init::Uniform, rng)?);
        }
        let fusion = Mlp::new(
            store,
            &format!("{name}.fusion"),
            3 * c,
            &[LayerSpec::hidden(c), LayerSpec::output(c)],
            Init::Uniform,
            rng,
        )?;
        let gamma = store.register(format!("{name}.gamma"), Tensor::scalar(0.0))?;
        Ok(Self {
            channels,
            edge,
            queries,
            keys,
            transforms,
            fusion,
            gamma,
        })
    }

    /// `h_φ([x_i ; x_j − x_i ; p_i − p_j])` for a single edge.
    pub fn edge_features(&self, ps: &ParamStore, xi: &[f64], xj: &[f64], dp: Vec3) -> Result<Vec<f64>> {
        let input = edge_input_row(xi, xj, dp);
        let t = Tensor::new(&[1, input.len()], input)?;
        Ok(self.edge.forward(ps, &t)?.into_data())
    }

    /// Attention weights and aggregate for one scale slot, given node
    /// features and edge features laid out as in [`Grm::forward`].
    pub fn scale_attention(
        &self,
        ps: &ParamStore,
        graph: &KnnGraph,
        nodes: &Tensor,
        edge_feats: &Tensor,
        slot: usize,
    ) -> Result<(Vec<ScaleWeights>, Tensor)> {
        let offsets = edge_offsets(graph);
        let sc = self.slot_forward(ps, graph, &offsets, nodes, edge_feats, slot)?;
        let m = graph.num_nodes();
        let mut weights = Vec::with_capacity(m);
        for i in 0..m {
            weights.push(
                (0..sc.k)
                    .map(|t| (graph.neighbors[i][t], sc.alpha[i * sc.k + t], sc.gauss[i * sc.k + t]))
                    .collect(),
            );
        }
        let agg = aggregate(&sc, m, self.channels);
        Ok((weights, agg))
    }

    fn slot_forward(
        &self,
        ps: &ParamStore,
        graph: &KnnGraph,
        offsets: &[usize],
        nodes: &Tensor,
        edge_feats: &Tensor,
        slot: usize,
    ) -> Result<SlotCache> {
        let m = graph.num_nodes();
        let k = graph.scale_len(slot);
        let sigma = graph.sigmas[slot];
        let edge_rows: Vec<usize> = (0..m).flat_map(|i| (0..k).map(move |t| offsets[i] + t)).collect();
        let sub_edges = edge_feats.gather_rows(&edge_rows);
        let transformed = self.transforms[slot].forward(ps, &sub_edges)?;
        let q = self.queries[slot].forward(ps, nodes)?;
        let key = self.keys[slot].forward(ps, nodes)?;
        let mut alpha = vec![0.0; m * k];
        let mut gauss = vec![0.0; m * k];
        for i in 0..m {
            let a = &mut alpha[i * k..(i + 1) * k];
            for t in 0..k {
                let j = graph.neighbors[i][t];
                a[t] = cosine_sim(q.row(i), key.row(j));
                let d = graph.distances[i][t];
                gauss[i * k + t] = (-d * d / (2.0 * sigma * sigma)).exp();
            }
            softmax_in_place(a);
        }
        Ok(SlotCache {
            k,
            edge_rows,
            edge_feats: sub_edges,
            transformed,
            q,
            key,
            alpha,
            gauss,
        })
    }

    /// Runs the module on proposals at `coords` with features `feats`,
    /// using backbone points for the IDW step. `scales` overrides the
    /// neighborhood size of each of the three scale slots.
    pub fn forward(
        &self,
        ps: &ParamStore,
        coords: &[Vec3],
        feats: &Tensor,
        point_positions: &[Vec3],
        point_features: &Tensor,
        scales: &[usize; 3],
    ) -> Result<(GrmOutput, GrmCache)> {
        self.forward_masked(ps, coords, feats, point_positions, point_features, scales, [true; 3])
    }

    /// [`Grm::forward`] with some scale branches switched off: an inactive
    /// branch contributes zeros to the fusion input.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_masked(
        &self,
        ps: &ParamStore,
        coords: &[Vec3],
        feats: &Tensor,
        point_positions: &[Vec3],
        point_features: &Tensor,
        scales: &[usize; 3],
        active: [bool; 3],
    ) -> Result<(GrmOutput, GrmCache)> {
        let c = self.channels;
        let m = coords.len();
        if m == 0 {
            return Err(Error::Input("graph reasoning needs at least one proposal".into()));
        }
        if feats.rows() != m || feats.cols() != c || point_features.cols() != c {
            return Err(Error::dim("grm", "feature widths do not match"));
        }
        if m == 1 {
            let cache = GrmCache::degenerate(point_features.rows());
            return Ok((
                GrmOutput {
                    features: feats.clone(),
                    degenerate: true,
                },
                cache,
            ));
        }
        let nb = IdwNeighborhood::build(coords, point_positions, IDW_NEIGHBORS);
        let (nodes, fallback) = idw_aggregate(&nb, point_features, feats);
        let graph = KnnGraph::build(coords, scales)?;
        let offsets = edge_offsets(&graph);

        let mut edge_in_data = Vec::with_capacity(offsets[m] * (2 * c + 3));
        for i in 0..m {
            for &j in &graph.neighbors[i] {
                edge_in_data.extend(edge_input_row(nodes.row(i), nodes.row(j), sub(coords[i], coords[j])));
            }
        }
        let edge_in = Tensor::from_parts(vec![offsets[m], 2 * c + 3], edge_in_data);
        let (edge_feats, edge_cache) = self.edge.forward_cached(ps, &edge_in)?;

        let mut slots = Vec::with_capacity(3);
        let mut aggregates = Vec::with_capacity(3);
        for s in 0..3 {
            let sc = self.slot_forward(ps, &graph, &offsets, &nodes, &edge_feats, s)?;
            aggregates.push(if active[s] { aggregate(&sc, m, c) } else { Tensor::zeros(&[m, c]) });
            slots.push(sc);
        }
        let fusion_in = Tensor::hcat(&[&aggregates[0], &aggregates[1], &aggregates[2]])?;
        let (fused, fusion_in_cache) = self.fusion.forward_cached(ps, &fusion_in)?;
        let gamma = ps.value(self.gamma).data()[0];
        let mut out = feats.clone();
        out.add_scaled(&fused, gamma);

        let cache = GrmCache {
            degenerate: false,
            nodes,
            fallback,
            idw_weights: nb.weights(),
            idw_neighbors: nb.neighbors,
            n_points: point_features.rows(),
            graph,
            offsets,
            edge_in,
            edge_cache,
            slots,
            active,
            fusion_in_cache,
            fused,
            gamma,
        };
        Ok((
            GrmOutput {
                features: out,
                degenerate: false,
            },
            cache,
        ))
    }

    /// Returns gradients with respect to the proposal features and the
    /// backbone point features.
    pub fn backward(&self, ps: &ParamStore, cache: &GrmCache, d_out: &Tensor, grads: &mut Grads) -> (Tensor, Tensor) {
        let c = self.channels;
        let mut d_feats = d_out.clone();
        let mut d_points = Tensor::zeros(&[cache.n_points.max(1), c]);
        if cache.degenerate {
            return (d_feats, d_points);
        }
        let m = d_out.rows();
        grads.get_mut(self.gamma).data_mut()[0] +=
            d_out.data().iter().zip(cache.fused.data()).map(|(a, b)| a * b).sum::<f64>();
        let mut d_fused = d_out.clone();
        d_fused.scale(cache.gamma);
        let d_fusion_in = self.fusion.backward(ps, &cache.fusion_in_cache, &d_fused, grads);
        let d_aggs = d_fusion_in.hsplit(&[c, c, c]);

        let mut d_nodes = Tensor::zeros(&[m, c]);
        let mut d_edges = Tensor::zeros(&[cache.offsets[m], c]);
        for (s, (sc, d_agg)) in cache.slots.iter().zip(&d_aggs).enumerate() {
            if !cache.active[s] {
                continue;
            }
            let k = sc.k;
            let mut d_transformed = Tensor::zeros(sc.transformed.shape());
            let mut dq = Tensor::zeros(sc.q.shape());
            let mut dkey = Tensor::zeros(sc.key.shape());
            let mut d_alpha = vec![0.0; k];
            for i in 0..m {
                let da = d_agg.row(i);
                for t in 0..k {
                    let r = i * k + t;
                    let coef = sc.alpha[r] * sc.gauss[r];
                    let p = sc.transformed.row(r);
                    d_alpha[t] = sc.gauss[r] * p.iter().zip(da).map(|(a, b)| a * b).sum::<f64>();
                    for (g, d) in d_transformed.row_mut(r).iter_mut().zip(da) {
                        *g += coef * d;
                    }
                }
                softmax_backward_in_place(&sc.alpha[i * k..(i + 1) * k], &mut d_alpha);
                for t in 0..k {
                    let j = cache.graph.neighbors[i][t];
                    let mut gq = vec![0.0; c];
                    let mut gk = vec![0.0; c];
                    cosine_sim_backward(sc.q.row(i), sc.key.row(j), d_alpha[t], &mut gq, &mut gk);
                    for (a, b) in dq.row_mut(i).iter_mut().zip(&gq) {
                        *a += b;
                    }
                    for (a, b) in dkey.row_mut(j).iter_mut().zip(&gk) {
                        *a += b;
                    }
                }
            }
            let d_sub_edges = self.transforms[s].backward(ps, &sc.edge_feats, &d_transformed, grads);
            for (r, &row) in sc.edge_rows.iter().enumerate() {
                for (a, b) in d_edges.row_mut(row).iter_mut().zip(d_sub_edges.row(r)) {
                    *a += b;
                }
            }
            d_nodes.add_assign(&self.queries[s].backward(ps, &cache.nodes, &dq, grads));
            d_nodes.add_assign(&self.keys[s].backward(ps, &cache.nodes, &dkey, grads));
        }

        let d_edge_in = self.edge.backward(ps, &cache.edge_cache, &d_edges, grads);
        for i in 0..m {
            for (t, &j) in cache.graph.neighbors[i].iter().enumerate() {
                let row = d_edge_in.row(cache.offsets[i] + t);
                let (dxi, rest) = row.split_at(c);
                let dxj = &rest[..c];
                for k in 0..c {
                    d_nodes.row_mut(i)[k] += dxi[k] - dxj[k];
                    d_nodes.row_mut(j)[k] += dxj[k];
                }
            }
        }

        for i in 0..m {
            if cache.fallback[i] {
                for (a, b) in d_feats.row_mut(i).iter_mut().zip(d_nodes.row(i)) {
                    *a += b;
                }
            } else if let Some(w) = &cache.idw_weights[i] {
                for (&j, wj) in cache.idw_neighbors[i].iter().zip(w) {
                    for (a, b) in d_points.row_mut(j).iter_mut().zip(d_nodes.row(i)) {
                        *a += wj * b;
                    }
                }
            }
        }
        (d_feats, d_points)
    }
}

impl GrmCache {
    fn degenerate(n_points: usize) -> Self {
        Self {
            degenerate: true,
            nodes: Tensor::zeros(&[1, 1]),
            fallback: Vec::new(),
            idw_weights: Vec::new(),
            idw_neighbors: Vec::new(),
            n_points,
            graph: KnnGraph {
                scales: Vec::new(),
                neighbors: Vec::new(),
                distances: Vec::new(),
                sigmas: Vec::new(),
            },
            offsets: Vec::new(),
            edge_in: Tensor::zeros(&[1, 1]),
            edge_cache: MlpCache::empty(),
            slots: Vec::new(),
            active: [true; 3],
            fusion_in_cache: MlpCache::empty(),
            fused: Tensor::zeros(&[1, 1]),
            gamma: 0.0,
        }
    }

    /// Edge features computed in the forward pass, one row per
    /// `(i, neighbor)` pair in neighbor-list order.
    pub fn edge_inputs(&self) -> &Tensor {
        &self.edge_in
    }

    pub fn nodes(&self) -> &Tensor {
        &self.nodes
    }

    pub fn graph(&self) -> &KnnGraph {
        &self.graph
    }

    /// `α_ij` for one slot, flattened as `[i * k + t]`, with `k`.
    pub fn attention(&self, slot: usize) -> (&[f64], usize) {
        (&self.slots[slot].alpha, self.slots[slot].k)
    }

    /// Gaussian spatial weights for one slot, laid out like [`Self::attention`].
    pub fn spatial_weights(&self, slot: usize) -> &[f64] {
        &self.slots[slot].gauss
    }
}

fn edge_offsets(graph: &KnnGraph) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(graph.num_nodes() + 1);
    offsets.push(0);
    for n in &graph.neighbors {
        offsets.push(offsets.last().unwrap() + n.len());
    }
    offsets
}

fn edge_input_row(xi: &[f64], xj: &[f64], dp: Vec3) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * xi.len() + 3);
    row.extend_from_slice(xi);
    row.extend(xj.iter().zip(xi).map(|(b, a)| b - a));
    row.extend_from_slice(&dp);
    row
}

fn aggregate(sc: &SlotCache, m: usize, c: usize) -> Tensor {
    let mut out = Tensor::zeros(&[m, c]);
    for i in 0..m {
        let row = out.row_mut(i);
        for t in 0..sc.k {
            let r = i * sc.k + t;
            let coef = sc.alpha[r] * sc.gauss[r];
            for (o, p) in row.iter_mut().zip(sc.transformed.row(r)) {
                *o += coef * p;
            }
        }
    }
    out
}
