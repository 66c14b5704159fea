//! Detection evaluation: greedy matching, all-point interpolated average
//! precision and mAP at several IoU thresholds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry3d::{rotated_iou3d, LabeledBox, OrientedBox3D};

/// IoU thresholds reported by default.
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox3D,
    pub label: usize,
    pub score: f64,
    pub scene_id: u64,
}

/// Orders detections by descending score; ties go to the lower scene id and
/// then keep their input order.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.scene_id.cmp(&b.scene_id)));
}

/// Greedy matching of score-sorted detections of one class. Each detection
/// takes the unmatched ground truth of its scene with the highest IoU, if
/// that IoU reaches `thresh`. Returns one true-positive flag per detection.
pub fn match_detections(dets: &[Detection], gts: &BTreeMap<u64, Vec<OrientedBox3D>>, thresh: f64) -> Vec<bool> {
    let mut used: BTreeMap<u64, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    dets.iter()
        .map(|d| {
            let (Some(scene_gts), Some(taken)) = (gts.get(&d.scene_id), used.get_mut(&d.scene_id)) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in scene_gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = rotated_iou3d(&d.bbox, gt);
                if iou >= thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Precision/recall curve with its all-point interpolated area.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
    /// False when there were no ground truths (AP is then reported as 0).
    pub defined: bool,
}

pub fn average_precision(flags: &[bool], num_gts: usize) -> PrCurve {
    if num_gts == 0 {
        return PrCurve {
            points: Vec::new(),
            ap: 0.0,
            defined: false,
        };
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            (tp as f64 / num_gts as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    // precision envelope: running max from the right
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.0 - prev_recall) * env;
        prev_recall = p.0;
    }
    PrCurve {
        points,
        ap: ap.clamp(0.0, 1.0),
        defined: true,
    }
}

/// Detections and ground truth of one scene.
#[derive(Clone, Debug, Default)]
pub struct EvalScene {
    pub scene_id: u64,
    pub detections: Vec<Detection>,
    pub gts: Vec<LabeledBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou: f64,
    /// Per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub num_classes: usize,
    pub thresholds: Vec<ThresholdReport>,
}

impl MapReport {
    pub fn map_at(&self, iou: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| t.iou == iou).map(|t| t.map)
    }
}

/// Per-class AP and the mean over classes that have ground truth.
pub fn map_at_iou(scenes: &[EvalScene], num_classes: usize, thresholds: &[f64]) -> MapReport {
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &iou in thresholds {
        let mut per_class_ap = Vec::with_capacity(num_classes);
        for class in 0..num_classes {
            let mut gts: BTreeMap<u64, Vec<OrientedBox3D>> = BTreeMap::new();
            let mut num_gts = 0;
            let mut dets = Vec::new();
            for s in scenes {
                let g: Vec<_> = s.gts.iter().filter(|b| b.label == class).map(|b| b.bbox).collect();
                num_gts += g.len();
                gts.insert(s.scene_id, g);
                dets.extend(
                    s.detections
                        .iter()
                        .filter(|d| d.label == class)
                        .map(|d| Detection { scene_id: s.scene_id, ..*d }),
                );
            }
            sort_detections(&mut dets);
            let flags = match_detections(&dets, &gts, iou);
            let curve = average_precision(&flags, num_gts);
            per_class_ap.push(curve.defined.then_some(curve.ap));
        }
        let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
        let map = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        per_threshold.push(ThresholdReport { iou, per_class_ap, map });
    }
    MapReport {
        num_classes,
        thresholds: per_threshold,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionFile {
    scene_id: u64,
    /// `[x, y, z, w, l, h, theta, class, score]`
    detections: Vec<Vec<f64>>,
    /// Settings of the run that produced the file; ignored when reading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// Serialises the detections of one scene, optionally recording the
/// producing run's config alongside.
pub fn detections_to_json(scene_id: u64, dets: &[Detection], config: Option<&serde_json::Value>) -> Result<String> {
    let file = DetectionFile {
        config: config.cloned(),
        scene_id,
        detections: dets
            .iter()
            .map(|d| {
                let mut t = LabeledBox {
                    bbox: d.bbox,
                    label: d.label,
                }
                .to_tuple()
                .to_vec();
                t.push(d.score);
                t
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Input(e.to_string()))
}

pub fn detections_from_json(text: &str, path: &Path) -> Result<(u64, Vec<Detection>)> {
    let parse_err = |location: String, message: String| Error::Parse {
        path: path.to_path_buf(),
        location,
        message,
    };
    let file: DetectionFile = serde_json::from_str(text)
        .map_err(|e| parse_err(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let mut dets = Vec::with_capacity(file.detections.len());
    for (i, t) in file.detections.iter().enumerate() {
        let loc = || format!("detections[{i}]");
        if t.len() != 9 {
            return Err(parse_err(loc(), format!("expected 9 values, got {}", t.len())));
        }
        let lb = LabeledBox::from_tuple(&t[..8]).map_err(|e| parse_err(loc(), e.to_string()))?;
        let score = t[8];
        if !(0.0..=1.0).contains(&score) {
            return Err(parse_err(loc(), format!("score {score} outside [0,1]")));
        }
        dets.push(Detection {
            bbox: lb.bbox,
            label: lb.label,
            score,
            scene_id: file.scene_id,
        });
    }
    Ok((file.scene_id, dets))
}

pub fn write_detections(path: &Path, scene_id: u64, dets: &[Detection], config: Option<&serde_json::Value>) -> Result<()> {
    std::fs::write(path, detections_to_json(scene_id, dets, config)?).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<(u64, Vec<Detection>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detections_from_json(&text, path)
}
