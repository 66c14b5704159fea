//! Small feature extractors standing in for the sparse-convolution point
//! backbone and the image CNN: a per-point MLP with farthest-point seeding
//! and radius max-pooling, and a pool-then-MLP image pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry3d::{distance, CameraModel, Vec3};
use crate::kernels::{Grads, Init, LayerSpec, Mlp, MlpCache, ParamStore, Tensor};

pub const NUM_LEVELS: usize = 4;
pub const GROUP_RADIUS: f64 = 0.3;
pub const GROUP_CAP: usize = 32;

/// Colored point cloud in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Input("point cloud is empty".into()));
        }
        if positions.len() != colors.len() {
            return Err(Error::Input("positions and colors differ in length".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("point cloud has non-finite positions".into()));
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Per-point input features `[x, y, z, r, g, b]`.
    pub fn input_features(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * 6);
        for (p, c) in self.positions.iter().zip(&self.colors) {
            data.extend_from_slice(p);
            data.extend_from_slice(c);
        }
        Tensor::from_parts(vec![self.len(), 6], data)
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

/// Candidate objects: 3D reference coordinates plus features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub coords: Vec<Vec3>,
    pub features: Tensor,
}

/// Multi-scale image features; level `l` is `[H0/2^(l+1), W0/2^(l+1), C_img]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<Tensor>,
}

impl ImagePyramid {
    pub fn channels(&self) -> usize {
        self.levels[0].shape()[2]
    }

    /// `(height, width)` of a level.
    pub fn level_size(&self, l: usize) -> (usize, usize) {
        let s = self.levels[l].shape();
        (s[0], s[1])
    }
}

fn lex_less(a: &Vec3, b: &Vec3) -> bool {
    a.partial_cmp(b) == Some(std::cmp::Ordering::Less)
}

/// Farthest-point sampling starting at the lexicographically smallest
/// position; ties go to the lowest index.
pub fn farthest_point_sampling(positions: &[Vec3], m: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m == 0 || n < m {
        return Err(Error::Input(format!("cannot sample {m} seeds from {n} points")));
    }
    let mut start = 0;
    for i in 1..n {
        if lex_less(&positions[i], &positions[start]) {
            start = i;
        }
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..m {
        chosen.push(cur);
        let pc = positions[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in positions.iter().enumerate() {
            let d = {
                let dx = p[0] - pc[0];
                let dy = p[1] - pc[1];
                let dz = p[2] - pc[2];
                dx * dx + dy * dy + dz * dz
            };
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(chosen)
}

/// Up to `cap` nearest points within `radius` of each seed (nearest first);
/// falls back to the single nearest point when the ball is empty.
pub fn group_seeds(positions: &[Vec3], seeds: &[usize], radius: f64, cap: usize) -> Vec<Vec<usize>> {
    seeds
        .iter()
        .map(|&s| {
            let c = positions[s];
            let mut cand: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .map(|(i, p)| (distance(*p, c), i))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut g: Vec<usize> = cand.iter().take_while(|(d, _)| *d <= radius).take(cap).map(|&(_, i)| i).collect();
            if g.is_empty() {
                g.push(cand[0].1);
            }
            g
        })
        .collect()
}

/// Seed indices and their neighborhoods. Depends only on geometry, so it is
/// computed once per scene.
#[derive(Clone, Debug)]
pub struct SeedGroups {
    pub seeds: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl SeedGroups {
    pub fn build(pc: &PointCloud, m: usize) -> Result<Self> {
        let seeds = farthest_point_sampling(&pc.positions, m)?;
        let groups = group_seeds(&pc.positions, &seeds, GROUP_RADIUS, GROUP_CAP);
        Ok(Self { seeds, groups })
    }
}

/// Per-point MLP on `(position, color)` followed by radius max-pooling at
/// the seeds.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    mlp: Mlp,
    pub channels: usize,
}

pub struct PointEncoderCache {
    mlp: MlpCache,
    argmax: Vec<Vec<usize>>,
    n_points: usize,
}

/// Backbone output for one scene.
#[derive(Clone, Debug)]
pub struct PointEncoding {
    /// `x^p`: `[N, C]` per-point features.
    pub point_features: Tensor,
    pub proposals: ProposalSet,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let spec = [LayerSpec::hidden(channels), LayerSpec::hidden(channels)];
        let mlp = Mlp::new(store, name, 6, &spec, Init::Uniform, rng)?;
        Ok(Self { mlp, channels })
    }

    /// Samples `m` seeds and encodes the cloud.
    pub fn encode_points(&self, ps: &ParamStore, pc: &PointCloud, m: usize) -> Result<PointEncoding> {
        let groups = SeedGroups::build(pc, m)?;
        self.forward_cached(ps, pc, &groups).map(|(e, _)| e)
    }

    pub fn forward_cached(
        &self,
        ps: &ParamStore,
        pc: &PointCloud,
        groups: &SeedGroups,
    ) -> Result<(PointEncoding, PointEncoderCache)> {
        let (feats, mlp_cache) = self.mlp.forward_cached(ps, &pc.input_features())?;
        let c = self.channels;
        let m = groups.seeds.len();
        let mut seed_feats = Tensor::zeros(&[m, c]);
        let mut argmax = Vec::with_capacity(m);
        for (s, group) in groups.groups.iter().enumerate() {
            let out = seed_feats.row_mut(s);
            let mut arg = vec![group[0]; c];
            out.copy_from_slice(feats.row(group[0]));
            for &j in &group[1..] {
                for (k, &v) in feats.row(j).iter().enumerate() {
                    if v > out[k] {
                        out[k] = v;
                        arg[k] = j;
                    }
                }
            }
            argmax.push(arg);
        }
        let coords = groups.seeds.iter().map(|&i| pc.positions[i]).collect();
        let enc = PointEncoding {
            point_features: feats,
            proposals: ProposalSet {
                coords,
                features: seed_feats,
            },
        };
        let cache = PointEncoderCache {
            mlp: mlp_cache,
            argmax,
            n_points: pc.len(),
        };
        Ok((enc, cache))
    }

    /// Backpropagates gradients on both outputs into the MLP parameters.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &PointEncoderCache,
        d_point_features: Option<&Tensor>,
        d_seed_features: &Tensor,
        grads: &mut Grads,
    ) {
        let c = self.channels;
        let mut d = match d_point_features {
            Some(t) => t.clone(),
            None => Tensor::zeros(&[cache.n_points, c]),
        };
        for (s, arg) in cache.argmax.iter().enumerate() {
            for (k, &j) in arg.iter().enumerate() {
                d.row_mut(j)[k] += d_seed_features.get2(s, k);
            }
        }
        self.mlp.backward(ps, &cache.mlp, &d, grads);
    }
}

/// Z-buffer splat of a colored cloud into an `[H0, W0, 4]` raster of
/// `(r, g, b, depth)`; empty pixels are zero.
pub fn rasterize_scene(pc: &PointCloud, cam: &CameraModel) -> Tensor {
    let (h, w) = (cam.height, cam.width);
    let mut raster = Tensor::zeros(&[h, w, 4]);
    let data = raster.data_mut();
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        let proj = cam.project_point(*p);
        if proj.depth <= crate::geometry3d::MIN_DEPTH {
            continue;
        }
        let (u, v) = (proj.pixel[0].floor(), proj.pixel[1].floor());
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let base = (v as usize * w + u as usize) * 4;
        let cur = data[base + 3];
        if cur == 0.0 || proj.depth < cur {
            data[base..base + 3].copy_from_slice(c);
            data[base + 3] = proj.depth;
        }
    }
    raster
}

/// Average-pools an `[H, W, C]` map by an integer stride.
pub fn average_pool(map: &Tensor, stride: usize) -> Tensor {
    let s = map.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ho, wo) = (h / stride, w / stride);
    let mut out = Tensor::zeros(&[ho, wo, c]);
    let inv = 1.0 / (stride * stride) as f64;
    let src = map.data();
    let dst = out.data_mut();
    for y in 0..ho * stride {
        for x in 0..wo * stride {
            let o = ((y / stride) * wo + x / stride) * c;
            let i = (y * w + x) * c;
            for k in 0..c {
                dst[o + k] += src[i + k] * inv;
            }
        }
    }
    out
}

/// Pool-then-MLP image pyramid with one MLP per level.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    levels: Vec<Mlp>,
    pub channels: usize,
}

pub struct ImageEncoderCache {
    levels: Vec<MlpCache>,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let spec = [LayerSpec::hidden(channels), LayerSpec::output(channels)];
        let levels = (0..NUM_LEVELS)
            .map(|l| Mlp::new(store, &format!("{name}.level{l}"), 4, &spec, Init::Uniform, rng))
            .collect::<Result<_>>()?;
        Ok(Self { levels, channels })
    }

    pub fn encode_image_pyramid(&self, ps: &ParamStore, raster: &Tensor) -> Result<ImagePyramid> {
        self.forward_cached(ps, raster).map(|(p, _)| p)
    }

    pub fn forward_cached(&self, ps: &ParamStore, raster: &Tensor) -> Result<(ImagePyramid, ImageEncoderCache)> {
        let s = raster.shape();
        if s.len() != 3 || s[2] != 4 {
            return Err(Error::Input(format!("raster must be [H0,W0,4], got {s:?}")));
        }
        if s[0] % 32 != 0 || s[1] % 32 != 0 {
            return Err(Error::Input(format!("raster size {}x{} is not divisible by 32", s[0], s[1])));
        }
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut caches = Vec::with_capacity(NUM_LEVELS);
        for (l, mlp) in self.levels.iter().enumerate() {
            let pooled = average_pool(raster, 1 << (l + 1));
            let (h, w) = (pooled.shape()[0], pooled.shape()[1]);
            let flat = pooled.reshape(&[h * w, 4])?;
            let (out, cache) = mlp.forward_cached(ps, &flat)?;
            levels.push(out.reshape(&[h, w, self.channels])?);
            caches.push(cache);
        }
        Ok((ImagePyramid { levels }, ImageEncoderCache { levels: caches }))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &ImageEncoderCache, d_levels: &[Tensor], grads: &mut Grads) {
        for ((mlp, c), d) in self.levels.iter().zip(&cache.levels).zip(d_levels) {
            let s = d.shape();
            let flat = Tensor::from_parts(vec![s[0] * s[1], s[2]], d.data().to_vec());
            mlp.backward(ps, c, &flat, grads);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn fps_exhaustive_is_permutation() {
        let pts: Vec<Vec3> = (0..7).map(|i| [i as f64 * 0.37 % 1.0, (i * i) as f64 * 0.1, 0.0]).collect();
        let mut s = farthest_point_sampling(&pts, 7).unwrap();
        s.sort();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
        assert!(farthest_point_sampling(&pts, 8).is_err());
    }

    #[test]
    fn fps_two_clusters() {
        // Start is the lexicographic minimum (index 3); the farthest point from it
        // is in the other cluster.
        let pts = [
            [5.0, 5.0, 0.0],
            [5.1, 5.0, 0.0],
            [5.0, 5.1, 0.0],
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.1, 0.0],
        ];
        let s = farthest_point_sampling(&pts, 2).unwrap();
        assert_eq!(s[0], 3);
        assert!(s[1] <= 2);
    }

    #[test]
    fn groups_are_nearest_first_and_capped() {
        let pts: Vec<Vec3> = (0..50).map(|i| [i as f64 * 0.005, 0.0, 0.0]).collect();
        let g = group_seeds(&pts, &[0], 0.3, 32);
        assert_eq!(g[0].len(), 32);
        assert_eq!(&g[0][..3], &[0, 1, 2]);
        let far = [[0.0; 3], [5.0, 0.0, 0.0]];
        assert_eq!(group_seeds(&far, &[0], 0.3, 32)[0], vec![0]);
    }

    #[test]
    fn rasterize_single_and_zbuffer() {
        let k = [[32.0, 0.0, 32.0], [0.0, 32.0, 32.0], [0.0, 0.0, 1.0]];
        let i3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let cam = CameraModel::new(k, i3, [0.0; 3], 64, 64).unwrap();
        let one = PointCloud::new(vec![[0.0, 0.0, 2.0]], vec![[0.2, 0.4, 0.6]]).unwrap();
        let r = rasterize_scene(&one, &cam);
        let nz: Vec<usize> = (0..64 * 64).filter(|&p| r.data()[p * 4 + 3] != 0.0).collect();
        assert_eq!(nz, vec![32 * 64 + 32]);
        assert_eq!(&r.data()[nz[0] * 4..nz[0] * 4 + 4], &[0.2, 0.4, 0.6, 2.0]);

        let two = PointCloud::new(vec![[0.0, 0.0, 3.0], [0.0, 0.0, 1.5]], vec![[1.0; 3], [0.5; 3]]).unwrap();
        let r = rasterize_scene(&two, &cam);
        assert_eq!(r.data()[nz[0] * 4 + 3], 1.5);
        assert_eq!(r.data()[nz[0] * 4], 0.5);

        let behind = PointCloud::new(vec![[0.0, 0.0, -1.0]], vec![[1.0; 3]]).unwrap();
        assert!(rasterize_scene(&behind, &cam).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_shapes_and_constant_input() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ImageEncoder::new(&mut ps, "img", 8, &mut rng).unwrap();
        let raster = Tensor::full(&[64, 64, 4], 0.3);
        let pyr = enc.encode_image_pyramid(&ps, &raster).unwrap();
        let sizes: Vec<_> = (0..4).map(|l| pyr.level_size(l)).collect();
        assert_eq!(sizes, vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
        for lvl in &pyr.levels {
            let first = lvl.data()[..8].to_vec();
            for px in lvl.data().chunks(8) {
                for (a, b) in px.iter().zip(&first) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!(enc.encode_image_pyramid(&ps, &Tensor::zeros(&[48, 64, 4])).is_err());
    }

    #[test]
    fn pooling_ignores_within_window_structure() {
        // Perturbations that cancel inside every 16x16 block leave level 3 unchanged.
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ImageEncoder::new(&mut ps, "img", 4, &mut rng).unwrap();
        let base = Tensor::new(&[64, 64, 4], (0..64 * 64 * 4).map(|i| ((i / 1024) % 3) as f64).collect()).unwrap();
        let mut pert = base.clone();
        for y in 0..64 {
            for x in 0..64 {
                let s = if (x + y) % 2 == 0 { 0.25 } else { -0.25 };
                pert.data_mut()[(y * 64 + x) * 4] += s;
            }
        }
        let a = enc.encode_image_pyramid(&ps, &base).unwrap();
        let b = enc.encode_image_pyramid(&ps, &pert).unwrap();
        assert!(a.levels[3].max_abs_diff(&b.levels[3]) < 1e-12);
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = PointEncoder::new(&mut ps, "pt", 8, &mut rng).unwrap();
        let pts: Vec<Vec3> = (0..40)
            .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..1.0)])
            .collect();
        let cols: Vec<[f64; 3]> = (0..40).map(|i| [i as f64 / 40.0, 0.5, 0.1]).collect();
        let a = enc.encode_points(&ps, &PointCloud::new(pts.clone(), cols.clone()).unwrap(), 6).unwrap();
        let perm: Vec<usize> = (0..40).rev().collect();
        let pc2 = PointCloud::new(perm.iter().map(|&i| pts[i]).collect(), perm.iter().map(|&i| cols[i]).collect()).unwrap();
        let b = enc.encode_points(&ps, &pc2, 6).unwrap();
        assert_eq!(a.proposals.coords, b.proposals.coords);
        assert_eq!(a.proposals.features, b.proposals.features);
    }
}
