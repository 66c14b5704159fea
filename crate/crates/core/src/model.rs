//! The full detector: point and image backbones feeding the decoder, plus
//! per-scene loss/gradient evaluation and batch inference.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbones::{rasterize_scene, ImageEncoder, PointCloud, PointEncoder, SeedGroups};
use crate::config::RunConfig;
use crate::decoder::{assign_targets, total_loss, Ablation, Decoder, DecoderInput, LossBreakdown, StageGrads};
use crate::error::{Error, Result};
use crate::evalkit::{map_at_iou, Detection, EvalScene, MapReport, DEFAULT_THRESHOLDS};
use crate::geometry3d::{CameraModel, LabeledBox, Vec3};
use crate::kernels::{Grads, ParamStore, Tensor};
use crate::synthdata::SceneSample;
use crate::Execution;

/// Keeps the first point falling in each voxel of edge `size`.
pub fn voxel_downsample(pc: &PointCloud, size: f64) -> Result<PointCloud> {
    if size <= 0.0 {
        return Ok(pc.clone());
    }
    let mut seen = HashMap::new();
    let (mut positions, mut colors) = (Vec::new(), Vec::new());
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        let key = p.map(|v| (v / size).floor() as i64);
        if seen.insert(key, ()).is_none() {
            positions.push(*p);
            colors.push(*c);
        }
    }
    PointCloud::new(positions, colors)
}

/// Everything about a scene that does not depend on parameters.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene_id: u64,
    pub pc: PointCloud,
    pub groups: SeedGroups,
    pub raster: Tensor,
    pub camera: CameraModel,
    pub bounds: (Vec3, Vec3),
    pub gts: Vec<LabeledBox>,
}

impl PreparedScene {
    pub fn new(scene: &SceneSample, config: &RunConfig) -> Result<Self> {
        let pc = voxel_downsample(&scene.pc, config.voxel_size)?;
        if pc.len() < config.num_queries {
            return Err(Error::Input(format!(
                "scene {} has {} points, fewer than {} queries",
                scene.scene_id,
                pc.len(),
                config.num_queries
            )));
        }
        if let Some(g) = scene.gts.iter().find(|g| g.label >= config.num_classes) {
            return Err(Error::Input(format!(
                "scene {} has class {} but the model knows {}",
                scene.scene_id, g.label, config.num_classes
            )));
        }
        let groups = SeedGroups::build(&pc, config.num_queries)?;
        let raster = rasterize_scene(&pc, &scene.camera);
        let bounds = pc.bounds();
        Ok(Self {
            scene_id: scene.scene_id,
            pc,
            groups,
            raster,
            camera: scene.camera.clone(),
            bounds,
            gts: scene.gts.clone(),
        })
    }

    pub fn prepare_all(scenes: &[SceneSample], config: &RunConfig, exec: Execution) -> Result<Vec<Self>> {
        exec.map(scenes, |s| Self::new(s, config)).into_iter().collect()
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: RunConfig,
    pub store: ParamStore,
    pub points: PointEncoder,
    pub image: ImageEncoder,
    pub decoder: Decoder,
}

impl Detector {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let points = PointEncoder::new(&mut store, "backbone.points", config.channels, &mut rng)?;
        let image = ImageEncoder::new(&mut store, "backbone.image", config.image_channels, &mut rng)?;
        let decoder = Decoder::new(&mut store, config.decoder(), &mut rng)?;
        Ok(Self {
            config,
            store,
            points,
            image,
            decoder,
        })
    }

    /// Training loss of one scene and the gradient of its total.
    pub fn loss_and_grads(&self, scene: &PreparedScene) -> Result<(LossBreakdown, Grads)> {
        let ps = &self.store;
        let (enc, pcache) = self.points.forward_cached(ps, &scene.pc, &scene.groups)?;
        let (pyramid, icache) = self.image.forward_cached(ps, &scene.raster)?;
        let input = DecoderInput {
            coords: &enc.proposals.coords,
            seed_features: &enc.proposals.features,
            point_positions: &scene.pc.positions,
            point_features: &enc.point_features,
            pyramid: &pyramid,
            camera: &scene.camera,
            bounds: scene.bounds,
        };
        let (out, dcache) = self.decoder.forward(ps, &input, &Ablation::none())?;
        let assigns: Vec<_> = (0..out.predictions.len())
            .map(|t| assign_targets(&out.stage_coords[t], &scene.gts, t))
            .collect();
        let pairs: Vec<_> = out.predictions.iter().zip(&assigns).collect();
        let m = input.coords.len();
        let mut sg = vec![StageGrads::zeros(m, self.config.num_classes); pairs.len()];
        let loss = total_loss(&pairs, &scene.gts, Some(&mut sg));
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss of scene {}: {loss:?}", scene.scene_id),
            });
        }
        let mut grads = ps.grads_like();
        let dg = self.decoder.backward(ps, &input, &out, &dcache, &sg, &mut grads);
        self.image.backward(ps, &icache, &dg.levels, &mut grads);
        self.points
            .backward(ps, &pcache, Some(&dg.point_features), &dg.seed_features, &mut grads);
        Ok((loss, grads))
    }

    pub fn predict(&self, scene: &PreparedScene, ablation: &Ablation) -> Result<Vec<Detection>> {
        let ps = &self.store;
        let (enc, _) = self.points.forward_cached(ps, &scene.pc, &scene.groups)?;
        let (pyramid, _) = self.image.forward_cached(ps, &scene.raster)?;
        let input = DecoderInput {
            coords: &enc.proposals.coords,
            seed_features: &enc.proposals.features,
            point_positions: &scene.pc.positions,
            point_features: &enc.point_features,
            pyramid: &pyramid,
            camera: &scene.camera,
            bounds: scene.bounds,
        };
        let (out, _) = self.decoder.forward(ps, &input, ablation)?;
        Ok(out.detections(scene.scene_id))
    }

    /// Detections for every scene, in input order.
    pub fn predict_all(&self, scenes: &[PreparedScene], ablation: &Ablation, exec: Execution) -> Result<Vec<Vec<Detection>>> {
        exec.map(scenes, |s| self.predict(s, ablation)).into_iter().collect()
    }

    /// mAP report over `scenes` at the default IoU thresholds.
    pub fn evaluate(&self, scenes: &[PreparedScene], ablation: &Ablation, exec: Execution) -> Result<MapReport> {
        let dets = self.predict_all(scenes, ablation, exec)?;
        let eval: Vec<EvalScene> = scenes
            .iter()
            .zip(dets)
            .map(|(s, d)| EvalScene {
                scene_id: s.scene_id,
                detections: d,
                gts: s.gts.clone(),
            })
            .collect();
        Ok(map_at_iou(&eval, self.config.num_classes, &DEFAULT_THRESHOLDS))
    }

    /// Mean loss over `batch` and the matching mean gradient. Per-scene
    /// gradients are summed in batch order whatever the execution mode.
    pub fn batch_loss_and_grads(&self, batch: &[&PreparedScene], exec: Execution) -> Result<(LossBreakdown, Grads)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let results = exec.map(batch, |s| self.loss_and_grads(s));
        let mut total: Option<Grads> = None;
        let (mut cls, mut reg, mut ctr, mut npos) = (0.0, 0.0, 0.0, 0);
        for r in results {
            let (loss, g) = r?;
            cls += loss.cls;
            reg += loss.reg;
            ctr += loss.ctr;
            npos += loss.num_positive;
            match total.as_mut() {
                Some(t) => t.add_assign(&g),
                None => total = Some(g),
            }
        }
        let n = batch.len() as f64;
        let mut grads = total.expect("non-empty batch");
        grads.scale(1.0 / n);
        Ok((LossBreakdown::from_terms(cls / n, reg / n, ctr / n, npos), grads))
    }
}
