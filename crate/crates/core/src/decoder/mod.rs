//! Cascaded refinement decoder: graph reasoning, cross-modal attention and
//! per-stage prediction heads, with the stage-scheduled assigner and the
//! training objective.

mod assign;
mod heads;
mod loss;

pub use assign::{assign_targets, stage_schedule, Assignment, STAGE_MARGINS, STAGE_TOP_K};
pub use heads::{HeadsCache, StageGrads, StageHeads, StagePredictions, CLS_PRIOR_BIAS};
pub use loss::{
    bce_with_logits, focal_loss, regression_loss, total_loss, LossBreakdown, FOCAL_ALPHA, FOCAL_GAMMA, LAMBDA_CLS,
    LAMBDA_CTR, LAMBDA_REG,
};

use rand::Rng;

use crate::acmt::{Acmt, AcmtLayerCache, FusionMode, LayerMemory, RefPoint};
use crate::backbones::ImagePyramid;
use crate::error::{Error, Result};
use crate::evalkit::Detection;
use crate::geometry3d::{apply_center_update, decode_box, rotated_iou3d, CameraModel, OrientedBox3D, Vec3};
use crate::grm::{Grm, GrmCache};
use crate::kernels::{sigmoid, Grads, ParamStore, Tensor};

/// Detections scoring below this are dropped at inference.
pub const SCORE_THRESHOLD: f64 = 0.05;
/// Class-wise non-maximum suppression IoU.
pub const NMS_IOU: f64 = 0.5;

/// Module switches applied at inference (and optionally training).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_grm: bool,
    pub no_gating: bool,
    pub point_only: bool,
    /// Keep only the GRM branch whose neighborhood size is `K`.
    pub single_scale: Option<usize>,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    /// Parses `no-grm`, `no-gating`, `point-only` or `single-scale-k=K`.
    pub fn parse_flag(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no-grm" => self.no_grm = true,
            "no-gating" => self.no_gating = true,
            "point-only" => self.point_only = true,
            other => {
                let k = other
                    .strip_prefix("single-scale-k=")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| Error::Config(format!("unknown ablation `{other}`")))?;
                self.single_scale = Some(k);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub channels: usize,
    pub image_channels: usize,
    pub num_classes: usize,
    pub heads: usize,
    pub acmt_layers: usize,
    pub stages: usize,
    pub scales: [usize; 3],
    pub levels: usize,
}

/// Scene-level inputs of the decoder.
#[derive(Clone, Copy)]
pub struct DecoderInput<'a> {
    /// Initial proposal coordinates.
    pub coords: &'a [Vec3],
    pub seed_features: &'a Tensor,
    pub point_positions: &'a [Vec3],
    pub point_features: &'a Tensor,
    pub pyramid: &'a ImagePyramid,
    pub camera: &'a CameraModel,
    /// Proposal centers are kept inside this box.
    pub bounds: (Vec3, Vec3),
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `stage_coords[t]` are the query coordinates fed to stage `t`; the last
    /// entry holds the centers after the final update.
    pub stage_coords: Vec<Vec<Vec3>>,
    pub predictions: Vec<StagePredictions>,
}

impl DecoderOutput {
    /// Boxes decoded from the last stage at that stage's input coordinates.
    pub fn final_boxes(&self) -> Vec<Option<OrientedBox3D>> {
        let t = self.predictions.len() - 1;
        let p = &self.predictions[t];
        self.stage_coords[t]
            .iter()
            .zip(&p.deltas)
            .zip(&p.yaw)
            .map(|((c, d), y)| decode_box(*c, d, *y).ok())
            .collect()
    }

    /// Scored, thresholded and class-wise suppressed detections, best first.
    pub fn detections(&self, scene_id: u64) -> Vec<Detection> {
        let t = self.predictions.len() - 1;
        let p = &self.predictions[t];
        let mut cands = Vec::new();
        for (i, b) in self.final_boxes().into_iter().enumerate() {
            let Some(bbox) = b else { continue };
            let row = p.cls_logits.row(i);
            let (label, z) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &z)| if z > acc.1 { (k, z) } else { acc });
            let score = sigmoid(z) * sigmoid(p.ctr_logits[i]);
            if score >= SCORE_THRESHOLD {
                cands.push(Detection {
                    bbox,
                    label,
                    score,
                    scene_id,
                });
            }
        }
        class_wise_nms(cands, NMS_IOU)
    }
}

/// Greedy per-class suppression; output sorted by descending score.
pub fn class_wise_nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| k.label != d.label || rotated_iou3d(&k.bbox, &d.bbox) <= iou)
        {
            kept.push(d);
        }
    }
    kept
}

/// Moves every query by its predicted center shift, clamped to `bounds`.
pub fn update_centers(coords: &[Vec3], preds: &StagePredictions, bounds: (Vec3, Vec3)) -> Vec<Vec3> {
    coords
        .iter()
        .zip(&preds.deltas)
        .zip(&preds.yaw)
        .map(|((c, d), y)| {
            let p = apply_center_update(*c, d, *y);
            std::array::from_fn(|k| {
                if p[k].is_finite() {
                    p[k].clamp(bounds.0[k], bounds.1[k])
                } else {
                    c[k]
                }
            })
        })
        .collect()
}

/// Normalised image positions of the queries; `None` outside the image.
pub fn reference_points(coords: &[Vec3], camera: &CameraModel) -> Vec<RefPoint> {
    coords
        .iter()
        .map(|c| {
            let p = camera.project_point(*c);
            p.valid.then_some(p.ref_point)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub grm_first: Grm,
    pub grm_second: Option<Grm>,
    pub acmt: Acmt,
    pub heads: Vec<StageHeads>,
}

struct StageCache {
    acmt: Vec<AcmtLayerCache>,
    heads: HeadsCache,
}

pub struct DecoderCache {
    memory: Vec<LayerMemory>,
    grm_first: Option<GrmCache>,
    grm_second: Option<GrmCache>,
    stages: Vec<StageCache>,
    ablation: Ablation,
}

/// Gradients with respect to the decoder's scene-level inputs.
pub struct DecoderGrads {
    pub seed_features: Tensor,
    pub point_features: Tensor,
    pub levels: Vec<Tensor>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.stages == 0 {
            return Err(Error::Config("decoder needs at least one stage".into()));
        }
        let c = config.channels;
        let grm_first = Grm::new(store, "decoder.grm1", c, rng)?;
        let grm_second = if config.stages > 1 {
            Some(Grm::new(store, "decoder.grm2", c, rng)?)
        } else {
            None
        };
        let acmt = Acmt::new(
            store,
            "decoder.acmt",
            config.acmt_layers,
            c,
            config.image_channels,
            config.heads,
            config.levels,
            rng,
        )?;
        let heads = (0..config.stages)
            .map(|t| StageHeads::new(store, &format!("decoder.stage{t}"), c, config.num_classes, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            grm_first,
            grm_second,
            acmt,
            heads,
        })
    }

    /// Which GRM scale branches stay on. A single-scale ablation keeps only
    /// the branch trained at that neighborhood size.
    fn active_scales(&self, ablation: &Ablation) -> Result<[bool; 3]> {
        let Some(k) = ablation.single_scale else {
            return Ok([true; 3]);
        };
        let active = self.config.scales.map(|s| s == k);
        if !active.contains(&true) {
            return Err(Error::Config(format!(
                "single-scale-k={k} is not one of the model's scales {:?}",
                self.config.scales
            )));
        }
        Ok(active)
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        input: &DecoderInput,
        ablation: &Ablation,
    ) -> Result<(DecoderOutput, DecoderCache)> {
        self.forward_impl(ps, input, ablation, None)
    }

    /// Like [`Decoder::forward`], but every stage runs at the given
    /// coordinates instead of the updated ones. Center updates are not
    /// differentiated, so this is the function the backward pass computes
    /// the gradient of.
    pub fn forward_frozen(
        &self,
        ps: &ParamStore,
        input: &DecoderInput,
        ablation: &Ablation,
        stage_coords: &[Vec<Vec3>],
    ) -> Result<(DecoderOutput, DecoderCache)> {
        if stage_coords.len() != self.config.stages + 1 {
            return Err(Error::dim(
                "forward_frozen",
                format!("{} coordinate sets for {} stages", stage_coords.len(), self.config.stages),
            ));
        }
        self.forward_impl(ps, input, ablation, Some(stage_coords))
    }

    fn forward_impl(
        &self,
        ps: &ParamStore,
        input: &DecoderInput,
        ablation: &Ablation,
        frozen: Option<&[Vec<Vec3>]>,
    ) -> Result<(DecoderOutput, DecoderCache)> {
        let scales = self.config.scales;
        let active = self.active_scales(ablation)?;
        let mode = if ablation.no_gating {
            FusionMode::Equal
        } else {
            FusionMode::Gated
        };
        let memory = self.acmt.memory(ps, input.point_features, input.pyramid)?;
        let run_grm = |grm: &Grm, coords: &[Vec3], feats: &Tensor| -> Result<(Tensor, Option<GrmCache>)> {
            if ablation.no_grm {
                return Ok((feats.clone(), None));
            }
            let (out, cache) = grm.forward_masked(
                ps,
                coords,
                feats,
                input.point_positions,
                input.point_features,
                &scales,
                active,
            )?;
            Ok((out.features, Some(cache)))
        };

        let mut coords = frozen.map_or_else(|| input.coords.to_vec(), |f| f[0].clone());
        let (mut feats, grm_first) = run_grm(&self.grm_first, &coords, input.seed_features)?;
        let mut grm_second = None;
        let mut stage_coords = vec![coords.clone()];
        let mut predictions = Vec::with_capacity(self.config.stages);
        let mut stages = Vec::with_capacity(self.config.stages);
        for (t, heads) in self.heads.iter().enumerate() {
            let refs = if ablation.point_only {
                vec![None; coords.len()]
            } else {
                reference_points(&coords, input.camera)
            };
            let (y, acmt) = self.acmt.forward(ps, &feats, &refs, &memory, mode)?;
            let (preds, heads_cache) = heads.forward(ps, &y)?;
            coords = match frozen {
                Some(f) => f[t + 1].clone(),
                None => update_centers(&coords, &preds, input.bounds),
            };
            stage_coords.push(coords.clone());
            feats = y;
            if t == 0 {
                if let Some(grm) = &self.grm_second {
                    let (f, c) = run_grm(grm, &coords, &feats)?;
                    feats = f;
                    grm_second = c;
                }
            }
            stages.push(StageCache {
                acmt,
                heads: heads_cache,
            });
            predictions.push(preds);
        }
        Ok((
            DecoderOutput {
                stage_coords,
                predictions,
            },
            DecoderCache {
                memory,
                grm_first,
                grm_second,
                stages,
                ablation: *ablation,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        input: &DecoderInput,
        output: &DecoderOutput,
        cache: &DecoderCache,
        stage_grads: &[StageGrads],
        grads: &mut Grads,
    ) -> DecoderGrads {
        let m = input.coords.len();
        let c = self.config.channels;
        let mut mg = Acmt::memory_grads(&cache.memory);
        let mut d_points = Tensor::zeros_like(input.point_features);
        let mut d_next = Tensor::zeros(&[m, c]);
        for t in (0..self.heads.len()).rev() {
            let sc = &cache.stages[t];
            let mut d_y = self.heads[t].backward(ps, &output.predictions[t], &sc.heads, &stage_grads[t], grads);
            if t == 0 && self.grm_second.is_some() && !cache.ablation.no_grm {
                let (grm, gc) = (self.grm_second.as_ref().unwrap(), cache.grm_second.as_ref().unwrap());
                let (df, dp) = grm.backward(ps, gc, &d_next, grads);
                d_y.add_assign(&df);
                d_points.add_assign(&dp);
            } else {
                d_y.add_assign(&d_next);
            }
            d_next = self.acmt.backward(ps, &sc.acmt, &cache.memory, &d_y, grads, &mut mg);
        }
        let d_seed = match &cache.grm_first {
            Some(gc) => {
                let (df, dp) = self.grm_first.backward(ps, gc, &d_next, grads);
                d_points.add_assign(&dp);
                df
            }
            None => d_next,
        };
        let (dp, levels) = self.acmt.memory_backward(ps, input.point_features, input.pyramid, &mg, grads);
        d_points.add_assign(&dp);
        DecoderGrads {
            seed_features: d_seed,
            point_features: d_points,
            levels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry3d::encode_deltas;

    fn oracle_predictions(coords: &[Vec3], gts: &[OrientedBox3D], matches: &[usize]) -> StagePredictions {
        let m = coords.len();
        StagePredictions {
            cls_logits: Tensor::zeros(&[m, 1]),
            reg_raw: Tensor::zeros(&[m, 8]),
            deltas: coords.iter().zip(matches).map(|(c, &g)| encode_deltas(&gts[g], *c)).collect(),
            yaw: matches.iter().map(|&g| gts[g].yaw).collect(),
            ctr_logits: vec![0.0; m],
        }
    }

    #[test]
    fn oracle_deltas_reach_centers_and_stay() {
        let gts = [
            OrientedBox3D::new([1.0, -0.5, 0.4], [0.8, 1.2, 0.8], 0.6).unwrap(),
            OrientedBox3D::new([-1.5, 1.0, 0.5], [0.5, 0.5, 1.0], -1.1).unwrap(),
        ];
        let mut coords = vec![[1.2, -0.3, 0.3], [0.9, -0.9, 0.6], [-1.4, 1.1, 0.2]];
        let matches = [0, 0, 1];
        let bounds = ([-3.0, -3.0, 0.0], [3.0, 3.0, 3.0]);
        for stage in 0..3 {
            let preds = oracle_predictions(&coords, &gts, &matches);
            coords = update_centers(&coords, &preds, bounds);
            for (c, &g) in coords.iter().zip(&matches) {
                for k in 0..3 {
                    assert!((c[k] - gts[g].center[k]).abs() < 1e-12, "stage {stage}");
                }
            }
        }
    }

    #[test]
    fn nms_keeps_best_per_class() {
        let b = |x: f64| OrientedBox3D::new([x, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let d = |x, label, score| Detection {
            bbox: b(x),
            label,
            score,
            scene_id: 0,
        };
        let kept = class_wise_nms(vec![d(0.0, 0, 0.5), d(0.05, 0, 0.9), d(0.0, 1, 0.4), d(3.0, 0, 0.2)], 0.5);
        let scores: Vec<f64> = kept.iter().map(|k| k.score).collect();
        assert_eq!(scores, vec![0.9, 0.4, 0.2]);
    }

    #[test]
    fn ablation_flags() {
        let mut a = Ablation::none();
        a.parse_flag("no-grm").unwrap();
        a.parse_flag("single-scale-k=10").unwrap();
        assert!(a.no_grm);
        assert_eq!(a.single_scale, Some(10));
        assert!(a.parse_flag("single-scale-k=0").is_err());
        assert!(a.parse_flag("bogus").is_err());
    }
}
