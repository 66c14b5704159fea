//! Finite-difference checks of every parameterized op at small sizes.
//!
//! Each check builds a random instance, perturbs all parameters away from
//! their init (so zero-initialised parts take part), registers the op's
//! inputs as parameters too, and compares the backward pass of a random
//! linear probe of the output against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acmt::{Acmt, CrossAttention, CrossModalGate, FusionMode, MsDeformAttention, RefPoint};
use crate::backbones::{ImageEncoder, ImagePyramid, PointCloud, PointEncoder, SeedGroups};
use crate::decoder::{
    assign_targets, total_loss, Ablation, Decoder, DecoderConfig, DecoderInput, StageGrads, StageHeads,
};
use crate::error::{Error, Result};
use crate::geometry3d::{CameraModel, LabeledBox, OrientedBox3D, Vec3};
use crate::grm::Grm;
use crate::kernels::{
    finite_diff_check, GradCheckOptions, GradCheckReport, Grads, Init, LayerNorm, LayerSpec, Linear, Mlp,
    ParamId, ParamStore, Tensor,
};

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Entries probed per tensor and check.
const ENTRIES_PER_TENSOR: usize = 6;
/// Residual gate used in checks that include a graph module.
const GRM_GAMMA: f64 = 2.0;
const QK_SHRINK: f64 = 0.05;
const PIXEL_SHRINK: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    All,
    Kernels,
    Backbones,
    Grm,
    Acmt,
    Decoder,
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Module::All,
            "kernels" => Module::Kernels,
            "backbones" => Module::Backbones,
            "grm" => Module::Grm,
            "acmt" => Module::Acmt,
            "decoder" => Module::Decoder,
            _ => return Err(Error::Input(format!("unknown module `{s}`"))),
        })
    }
}

type CheckFn = fn(u64, bool) -> Result<GradCheckReport>;

/// `(op name, module, check)` for every op in the suite.
const CHECKS: &[(&str, Module, CheckFn)] = &[
    ("kernels.linear", Module::Kernels, check_linear),
    ("kernels.layernorm", Module::Kernels, check_layernorm),
    ("kernels.mlp", Module::Kernels, check_mlp),
    ("backbones.point_encoder", Module::Backbones, check_point_encoder),
    ("backbones.image_encoder", Module::Backbones, check_image_encoder),
    ("grm", Module::Grm, check_grm),
    ("acmt.cross_attention", Module::Acmt, check_cross_attention),
    ("acmt.deformable_attention", Module::Acmt, check_deformable),
    ("acmt.gate", Module::Acmt, check_gate),
    ("acmt.stack", Module::Acmt, check_acmt_stack),
    ("decoder.heads_loss", Module::Decoder, check_heads_loss),
    ("decoder.cascade", Module::Decoder, check_decoder),
];

pub fn op_names(module: Module) -> Vec<&'static str> {
    CHECKS
        .iter()
        .filter(|(_, m, _)| module == Module::All || *m == module)
        .map(|(n, _, _)| *n)
        .collect()
}

/// Worst result of one op over all seeds.
#[derive(Clone, Debug)]
pub struct OpOutcome {
    pub op: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    /// Parameter group with the largest error, and the seed it occurred at.
    pub worst_param: String,
    pub worst_seed: u64,
    /// Every parameter group of the op with its worst error over seeds.
    pub groups: Vec<(String, f64)>,
}

impl OpOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Runs every check of `module` for `seeds` seeds. `corrupt` names an op
/// whose analytic gradient is deliberately scaled, to exercise the failure
/// path.
pub fn run_suite(module: Module, seeds: u64, corrupt: Option<&str>) -> Result<Vec<OpOutcome>> {
    if let Some(op) = corrupt {
        if !CHECKS.iter().any(|(n, _, _)| *n == op) {
            return Err(Error::Input(format!("unknown op `{op}`")));
        }
    }
    let mut out = Vec::new();
    for &(name, m, check) in CHECKS {
        if module != Module::All && m != module {
            continue;
        }
        let mut outcome = OpOutcome {
            op: name.to_string(),
            seeds: seeds as usize,
            max_rel_error: 0.0,
            worst_param: String::new(),
            worst_seed: 0,
            groups: Vec::new(),
        };
        for seed in 0..seeds {
            let report = check(seed, corrupt == Some(name))?;
            for (param, err) in &report.per_param {
                match outcome.groups.iter_mut().find(|(p, _)| p == param) {
                    Some((_, e)) => *e = e.max(*err),
                    None => outcome.groups.push((param.clone(), *err)),
                }
            }
            if let Some((param, err)) = report.worst() {
                if outcome.worst_param.is_empty() || err > outcome.max_rel_error {
                    outcome.max_rel_error = err;
                    outcome.worst_param = param.to_string();
                    outcome.worst_seed = seed;
                }
            }
        }
        out.push(outcome);
    }
    Ok(out)
}

// ---- helpers ----

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(salt))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn jitter_params(ps: &mut ParamStore, rng: &mut ChaCha8Rng) {
    jitter_params_by(ps, rng, 0.5);
}

fn jitter_params_by(ps: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    for id in ps.ids().collect::<Vec<_>>() {
        ps.value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += amount * rng.random_range(-1.0..1.0));
    }
}

/// Scales every parameter whose name satisfies `pick`.
fn scale_params(ps: &mut ParamStore, pick: impl Fn(&str) -> bool, s: f64) {
    for id in ps.ids().collect::<Vec<_>>() {
        if pick(ps.name(id)) {
            ps.value_mut(id).scale(s);
        }
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rand_point(rng: &mut ChaCha8Rng) -> Vec3 {
    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)]
}

fn finish(
    op: &str,
    seed: u64,
    ps: &mut ParamStore,
    mut grads: Grads,
    corrupt: bool,
    loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    if corrupt {
        grads.scale(1.5);
    }
    let opts = GradCheckOptions {
        max_entries: Some(ENTRIES_PER_TENSOR),
        seed,
    };
    finite_diff_check(op, ps, &grads, opts, loss)
}

fn add_to(grads: &mut Grads, id: ParamId, d: &Tensor) {
    grads.get_mut(id).add_assign(d);
}

/// Moves classification logits off the rare-class prior; at the prior the
/// negatives' focal gradients are too small to resolve by differences.
fn neutral_cls_bias(ps: &mut ParamStore, heads: &StageHeads, rng: &mut ChaCha8Rng) {
    if let Some(b) = heads.cls.linears().last().and_then(|l| l.bias) {
        ps.value_mut(b).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

// ---- kernels ----

fn check_linear(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 1);
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "linear", 5, 4, Init::Uniform, &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    let x = ps.register("input.x", rand_tensor(&mut rng, &[3, 5]))?;
    let probe = rand_tensor(&mut rng, &[3, 4]);
    let mut grads = ps.grads_like();
    let dx = lin.backward(&ps, ps.value(x), &probe, &mut grads);
    add_to(&mut grads, x, &dx);
    finish("kernels.linear", seed, &mut ps, grads, corrupt, |ps| {
        Ok(dot(&lin.forward(ps, ps.value(x))?, &probe))
    })
}

fn check_layernorm(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 2);
    let mut ps = ParamStore::new();
    let ln = LayerNorm::new(&mut ps, "norm", 6)?;
    jitter_params(&mut ps, &mut rng);
    let x = ps.register("input.x", rand_tensor(&mut rng, &[4, 6]))?;
    let probe = rand_tensor(&mut rng, &[4, 6]);
    let (_, cache) = ln.forward_cached(&ps, ps.value(x))?;
    let mut grads = ps.grads_like();
    let dx = ln.backward(&ps, &cache, &probe, &mut grads);
    add_to(&mut grads, x, &dx);
    finish("kernels.layernorm", seed, &mut ps, grads, corrupt, |ps| {
        Ok(dot(&ln.forward(ps, ps.value(x))?, &probe))
    })
}

fn check_mlp(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 3);
    let mut ps = ParamStore::new();
    let spec = [LayerSpec::hidden_norm(7), LayerSpec::hidden(6), LayerSpec::output(3)];
    let mlp = Mlp::new(&mut ps, "mlp", 5, &spec, Init::Uniform, &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    let x = ps.register("input.x", rand_tensor(&mut rng, &[4, 5]))?;
    let probe = rand_tensor(&mut rng, &[4, 3]);
    let (_, cache) = mlp.forward_cached(&ps, ps.value(x))?;
    let mut grads = ps.grads_like();
    let dx = mlp.backward(&ps, &cache, &probe, &mut grads);
    add_to(&mut grads, x, &dx);
    finish("kernels.mlp", seed, &mut ps, grads, corrupt, |ps| {
        Ok(dot(&mlp.forward(ps, ps.value(x))?, &probe))
    })
}

// ---- backbones ----

fn check_point_encoder(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 4);
    let mut ps = ParamStore::new();
    let enc = PointEncoder::new(&mut ps, "points", 6, &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    let n = 24;
    let positions: Vec<Vec3> = (0..n).map(|_| rand_point(&mut rng).map(|v| v * 0.4)).collect();
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let pc = PointCloud::new(positions, colors)?;
    let groups = SeedGroups::build(&pc, 5)?;
    let probe_points = rand_tensor(&mut rng, &[n, 6]);
    let probe_seeds = rand_tensor(&mut rng, &[5, 6]);
    let (_, cache) = enc.forward_cached(&ps, &pc, &groups)?;
    let mut grads = ps.grads_like();
    enc.backward(&ps, &cache, Some(&probe_points), &probe_seeds, &mut grads);
    finish("backbones.point_encoder", seed, &mut ps, grads, corrupt, |ps| {
        let (e, _) = enc.forward_cached(ps, &pc, &groups)?;
        Ok(dot(&e.point_features, &probe_points) + dot(&e.proposals.features, &probe_seeds))
    })
}

fn check_image_encoder(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 5);
    let mut ps = ParamStore::new();
    let enc = ImageEncoder::new(&mut ps, "image", 3, &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    let raster = rand_tensor(&mut rng, &[32, 32, 4]);
    let (pyr, cache) = enc.forward_cached(&ps, &raster)?;
    let probes: Vec<Tensor> = pyr.levels.iter().map(|l| rand_tensor(&mut rng, l.shape())).collect();
    let mut grads = ps.grads_like();
    enc.backward(&ps, &cache, &probes, &mut grads);
    finish("backbones.image_encoder", seed, &mut ps, grads, corrupt, |ps| {
        let (p, _) = enc.forward_cached(ps, &raster)?;
        Ok(p.levels.iter().zip(&probes).map(|(l, q)| dot(l, q)).sum())
    })
}

// ---- grm ----

fn check_grm(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 6);
    let (m, n, c) = (9, 24, 4);
    let mut ps = ParamStore::new();
    let grm = Grm::new(&mut ps, "grm", c, &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    // a strong residual branch keeps its gradients well above difference noise
    ps.value_mut(grm.gamma).fill(GRM_GAMMA);
    let coords: Vec<Vec3> = (0..m).map(|_| rand_point(&mut rng)).collect();
    let points: Vec<Vec3> = (0..n).map(|_| rand_point(&mut rng)).collect();
    let feats = ps.register("input.feats", rand_tensor(&mut rng, &[m, c]))?;
    let pfeats = ps.register("input.point_feats", rand_tensor(&mut rng, &[n, c]))?;
    let probe = rand_tensor(&mut rng, &[m, c]);
    let scales = [2, 4, 8];
    let (_, cache) = grm.forward(&ps, &coords, ps.value(feats), &points, ps.value(pfeats), &scales)?;
    let mut grads = ps.grads_like();
    let (df, dp) = grm.backward(&ps, &cache, &probe, &mut grads);
    add_to(&mut grads, feats, &df);
    add_to(&mut grads, pfeats, &dp);
    finish("grm", seed, &mut ps, grads, corrupt, |ps| {
        let (o, _) = grm.forward(ps, &coords, ps.value(feats), &points, ps.value(pfeats), &scales)?;
        Ok(dot(&o.features, &probe))
    })
}

// ---- acmt ----

const LEVEL_SIZES: [(usize, usize); 4] = [(8, 10), (4, 5), (2, 3), (1, 2)];

fn register_levels(ps: &mut ParamStore, rng: &mut ChaCha8Rng, ci: usize) -> Result<Vec<ParamId>> {
    LEVEL_SIZES
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| ps.register(format!("input.level{l}"), rand_tensor(rng, &[h, w, ci])))
        .collect()
}

fn pyramid_of(ps: &ParamStore, ids: &[ParamId]) -> ImagePyramid {
    ImagePyramid {
        levels: ids.iter().map(|&id| ps.value(id).clone()).collect(),
    }
}

fn random_refs(rng: &mut ChaCha8Rng, m: usize) -> Vec<RefPoint> {
    (0..m)
        .map(|i| (i != 1).then(|| [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]))
        .collect()
}

fn check_cross_attention(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 7);
    let (m, n, c) = (4, 9, 8);
    let mut ps = ParamStore::new();
    let ca = CrossAttention::new(&mut ps, "cross", c, 4, &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    let y = ps.register("input.y", rand_tensor(&mut rng, &[m, c]))?;
    let x = ps.register("input.memory", rand_tensor(&mut rng, &[n, c]))?;
    let probe = rand_tensor(&mut rng, &[m, c]);
    let (k, v) = ca.memory(&ps, ps.value(x))?;
    let (_, cache) = ca.attend(&ps, ps.value(y), &k, &v)?;
    let mut grads = ps.grads_like();
    let (mut dk, mut dv) = (Tensor::zeros_like(&k), Tensor::zeros_like(&v));
    let dy = ca.backward(&ps, ps.value(y), &k, &v, &cache, &probe, &mut grads, &mut dk, &mut dv);
    add_to(&mut grads, y, &dy);
    // memory projections: K = X Wk, V = X Wv + b
    let dx = ca.key.backward(&ps, ps.value(x), &dk, &mut grads);
    add_to(&mut grads, x, &dx);
    let dx = ca.value.backward(&ps, ps.value(x), &dv, &mut grads);
    add_to(&mut grads, x, &dx);
    finish("acmt.cross_attention", seed, &mut ps, grads, corrupt, |ps| {
        Ok(dot(&ca.forward(ps, ps.value(y), ps.value(x))?, &probe))
    })
}

fn check_deformable(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 8);
    let (m, c, ci) = (5, 8, 3);
    let mut ps = ParamStore::new();
    let msd = MsDeformAttention::new(&mut ps, "deform", c, ci, 4, LEVEL_SIZES.len(), &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    let y = ps.register("input.y", rand_tensor(&mut rng, &[m, c]))?;
    let levels = register_levels(&mut ps, &mut rng, ci)?;
    let refs = random_refs(&mut rng, m);
    let probe = rand_tensor(&mut rng, &[m, c]);
    let pyr = pyramid_of(&ps, &levels);
    let maps = msd.value_maps(&ps, &pyr)?;
    let (_, cache) = msd.sample(&ps, ps.value(y), &refs, &maps)?;
    let mut grads = ps.grads_like();
    let mut d_maps: Vec<Tensor> = maps.iter().map(Tensor::zeros_like).collect();
    let dy = msd.backward(&ps, ps.value(y), &maps, &cache, &probe, &mut grads, &mut d_maps);
    add_to(&mut grads, y, &dy);
    let d_levels = msd.value_maps_backward(&ps, &pyr, &d_maps, &mut grads);
    for (id, d) in levels.iter().zip(&d_levels) {
        add_to(&mut grads, *id, d);
    }
    finish("acmt.deformable_attention", seed, &mut ps, grads, corrupt, |ps| {
        Ok(dot(&msd.forward(ps, ps.value(y), &refs, &pyramid_of(ps, &levels))?, &probe))
    })
}

fn check_gate(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 9);
    let (m, c) = (4, 8);
    let mut ps = ParamStore::new();
    let gate = CrossModalGate::new(&mut ps, "gate", c, 4, &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    let y = ps.register("input.y", rand_tensor(&mut rng, &[m, c]))?;
    let yp = ps.register("input.point_branch", rand_tensor(&mut rng, &[m, c]))?;
    let yi = ps.register("input.image_branch", rand_tensor(&mut rng, &[m, c]))?;
    let probe = rand_tensor(&mut rng, &[m, c]);
    let (_, cache) = gate.forward(&ps, ps.value(y), ps.value(yp), ps.value(yi), FusionMode::Gated)?;
    let mut grads = ps.grads_like();
    let (dy, dyp, dyi) = gate.backward(&ps, ps.value(yp), ps.value(yi), &cache, &probe, &mut grads);
    add_to(&mut grads, y, &dy);
    add_to(&mut grads, yp, &dyp);
    add_to(&mut grads, yi, &dyi);
    finish("acmt.gate", seed, &mut ps, grads, corrupt, |ps| {
        let (o, _) = gate.forward(ps, ps.value(y), ps.value(yp), ps.value(yi), FusionMode::Gated)?;
        Ok(dot(&o, &probe))
    })
}

fn check_acmt_stack(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 10);
    let (m, n, c, ci) = (5, 7, 8, 4);
    let mut ps = ParamStore::new();
    let acmt = Acmt::new(&mut ps, "acmt", 2, c, ci, 4, LEVEL_SIZES.len(), &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    let y = ps.register("input.y", rand_tensor(&mut rng, &[m, c]))?;
    let x = ps.register("input.points", rand_tensor(&mut rng, &[n, c]))?;
    let levels = register_levels(&mut ps, &mut rng, ci)?;
    let refs = random_refs(&mut rng, m);
    let probe = rand_tensor(&mut rng, &[m, c]);
    let pyr = pyramid_of(&ps, &levels);
    let mem = acmt.memory(&ps, ps.value(x), &pyr)?;
    let (_, caches) = acmt.forward(&ps, ps.value(y), &refs, &mem, FusionMode::Gated)?;
    let mut grads = ps.grads_like();
    let mut mg = Acmt::memory_grads(&mem);
    let dy = acmt.backward(&ps, &caches, &mem, &probe, &mut grads, &mut mg);
    let (dx, dl) = acmt.memory_backward(&ps, ps.value(x), &pyr, &mg, &mut grads);
    add_to(&mut grads, y, &dy);
    add_to(&mut grads, x, &dx);
    for (id, d) in levels.iter().zip(&dl) {
        add_to(&mut grads, *id, d);
    }
    finish("acmt.stack", seed, &mut ps, grads, corrupt, |ps| {
        let mem = acmt.memory(ps, ps.value(x), &pyramid_of(ps, &levels))?;
        let (o, _) = acmt.forward(ps, ps.value(y), &refs, &mem, FusionMode::Gated)?;
        Ok(dot(&o, &probe))
    })
}

// ---- decoder ----

/// Two boxes around randomly chosen queries, so every stage has positives.
fn boxes_near(rng: &mut ChaCha8Rng, coords: &[Vec3], num_classes: usize) -> Result<Vec<LabeledBox>> {
    [0, coords.len() / 2]
        .iter()
        .map(|&i| {
            let c = coords[i];
            let center = [c[0] + 0.05, c[1] - 0.05, c[2] + 0.02];
            let size = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)];
            Ok(LabeledBox {
                bbox: OrientedBox3D::new(center, size, rng.random_range(-1.5..1.5))?,
                label: rng.random_range(0..num_classes),
            })
        })
        .collect()
}

fn check_heads_loss(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 11);
    let (m, c, k) = (8, 6, 3);
    let mut ps = ParamStore::new();
    let heads = StageHeads::new(&mut ps, "heads", c, k, &mut rng)?;
    jitter_params(&mut ps, &mut rng);
    neutral_cls_bias(&mut ps, &heads, &mut rng);
    let x = ps.register("input.features", rand_tensor(&mut rng, &[m, c]))?;
    let coords: Vec<Vec3> = (0..m).map(|_| rand_point(&mut rng)).collect();
    let gts = boxes_near(&mut rng, &coords, k)?;
    let assign = assign_targets(&coords, &gts, 0);
    let (preds, cache) = heads.forward(&ps, ps.value(x))?;
    let mut sg = vec![StageGrads::zeros(m, k)];
    total_loss(&[(&preds, &assign)], &gts, Some(&mut sg));
    let mut grads = ps.grads_like();
    let dx = heads.backward(&ps, &preds, &cache, &sg[0], &mut grads);
    add_to(&mut grads, x, &dx);
    finish("decoder.heads_loss", seed, &mut ps, grads, corrupt, |ps| {
        let (p, _) = heads.forward(ps, ps.value(x))?;
        Ok(total_loss(&[(&p, &assign)], &gts, None).total)
    })
}

fn check_decoder(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 12);
    let (m, n, c, ci, k) = (8, 20, 8, 4, 3);
    let config = DecoderConfig {
        channels: c,
        image_channels: ci,
        num_classes: k,
        heads: 4,
        acmt_layers: 1,
        stages: 3,
        scales: [2, 3, 5],
        levels: LEVEL_SIZES.len(),
    };
    let mut ps = ParamStore::new();
    let decoder = Decoder::new(&mut ps, config, &mut rng)?;
    // milder than elsewhere: three stacked stages saturate the logits otherwise
    jitter_params_by(&mut ps, &mut rng, 0.2);
    for h in &decoder.heads {
        neutral_cls_bias(&mut ps, h, &mut rng);
    }
    for g in std::iter::once(&decoder.grm_first).chain(&decoder.grm_second) {
        ps.value_mut(g.gamma).fill(GRM_GAMMA);
    }
    let seeds = ps.register("input.seed_features", rand_tensor(&mut rng, &[m, c]))?;
    let pfeats = ps.register("input.point_features", rand_tensor(&mut rng, &[n, c]))?;
    let levels = register_levels(&mut ps, &mut rng, ci)?;
    // Both rescalings leave the loss unchanged (cosine similarity ignores the
    // length of q and k; value projections absorb the pixel scale) but lift
    // the smallest gradients well above finite-difference noise.
    scale_params(&mut ps, |n| n.contains(".grm") && (n.contains(".query.") || n.contains(".key.")), QK_SHRINK);
    scale_params(&mut ps, |n| n.starts_with("input.level"), PIXEL_SHRINK);
    scale_params(&mut ps, |n| n.contains(".deform.value") && n.ends_with(".weight"), 1.0 / PIXEL_SHRINK);
    let coords: Vec<Vec3> = (0..m).map(|_| rand_point(&mut rng)).collect();
    let points: Vec<Vec3> = (0..n).map(|_| rand_point(&mut rng)).collect();
    let gts = boxes_near(&mut rng, &coords, k)?;
    let camera = CameraModel::look_at(
        [0.0, -4.0, 1.5],
        [0.0, 0.0, 0.5],
        [[8.0, 0.0, 8.0], [0.0, 8.0, 8.0], [0.0, 0.0, 1.0]],
        16,
        16,
    )?;
    let bounds = ([-2.0, -2.0, -1.0], [2.0, 2.0, 2.0]);
    let none = Ablation::none();
    let pyr = pyramid_of(&ps, &levels);
    let (sf, pf) = (ps.value(seeds).clone(), ps.value(pfeats).clone());
    let base = DecoderInput {
        coords: &coords,
        seed_features: &sf,
        point_positions: &points,
        point_features: &pf,
        pyramid: &pyr,
        camera: &camera,
        bounds,
    };
    let (out, _) = decoder.forward(&ps, &base, &none)?;
    let frozen = out.stage_coords.clone();
    let assigns: Vec<_> = (0..3).map(|t| assign_targets(&frozen[t], &gts, t)).collect();
    let (out, cache) = decoder.forward_frozen(&ps, &base, &none, &frozen)?;
    let pairs: Vec<_> = out.predictions.iter().zip(&assigns).collect();
    let mut sg = vec![StageGrads::zeros(m, k); 3];
    total_loss(&pairs, &gts, Some(&mut sg));
    let mut grads = ps.grads_like();
    let dg = decoder.backward(&ps, &base, &out, &cache, &sg, &mut grads);
    add_to(&mut grads, seeds, &dg.seed_features);
    add_to(&mut grads, pfeats, &dg.point_features);
    for (id, d) in levels.iter().zip(&dg.levels) {
        add_to(&mut grads, *id, d);
    }
    finish("decoder.cascade", seed, &mut ps, grads, corrupt, |ps| {
        let pyr = pyramid_of(ps, &levels);
        let inp = DecoderInput {
            seed_features: ps.value(seeds),
            point_features: ps.value(pfeats),
            pyramid: &pyr,
            ..base
        };
        let (o, _) = decoder.forward_frozen(ps, &inp, &none, &frozen)?;
        let pairs: Vec<_> = o.predictions.iter().zip(&assigns).collect();
        Ok(total_loss(&pairs, &gts, None).total)
    })
}

