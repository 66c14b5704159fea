use serde::{Deserialize, Serialize};

use super::assign::Assignment;
use super::heads::{StageGrads, StagePredictions};
use crate::geometry3d::{DeltaSextet, LabeledBox};
use crate::kernels::{sigmoid, softplus};

pub const LAMBDA_CLS: f64 = 1.0;
pub const LAMBDA_REG: f64 = 2.0;
pub const LAMBDA_CTR: f64 = 1.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Loss terms averaged over stages, each normalised by the stage's
/// positive count (at least one).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub total: f64,
    /// Positives summed over stages.
    pub num_positive: usize,
}

impl LossBreakdown {
    pub fn from_terms(cls: f64, reg: f64, ctr: f64, num_positive: usize) -> Self {
        Self {
            cls,
            reg,
            ctr,
            total: LAMBDA_CLS * cls + LAMBDA_REG * reg + LAMBDA_CTR * ctr,
            num_positive,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.reg.is_finite() && self.ctr.is_finite() && self.total.is_finite()
    }
}

/// Sigmoid focal loss of one logit against a binary target, with its derivative.
pub fn focal_loss(z: f64, positive: bool) -> (f64, f64) {
    let p = sigmoid(z);
    if positive {
        let log_p = -softplus(-z);
        let w = (1.0 - p).powf(FOCAL_GAMMA);
        let loss = -FOCAL_ALPHA * w * log_p;
        let grad = FOCAL_ALPHA * w * (FOCAL_GAMMA * p * log_p - (1.0 - p));
        (loss, grad)
    } else {
        let log_q = -softplus(z);
        let w = p.powf(FOCAL_GAMMA);
        let loss = -(1.0 - FOCAL_ALPHA) * w * log_q;
        let grad = (1.0 - FOCAL_ALPHA) * w * (p - FOCAL_GAMMA * (1.0 - p) * log_q);
        (loss, grad)
    }
}

/// Binary cross-entropy with logits against a soft target, with its derivative.
pub fn bce_with_logits(z: f64, target: f64) -> (f64, f64) {
    (softplus(z) - target * z, sigmoid(z) - target)
}

/// Rotated-IoU surrogate on face distances measured from the same point:
/// `1 − IoU·(1 + cos Δθ)/2 + ρ²/c²`, where the IoU and the DIoU centre and
/// enclosing terms are taken per axis in the box frame. Returns the loss and
/// its derivatives with respect to the predicted distances and yaw.
pub fn regression_loss(pred: &DeltaSextet, yaw: f64, target: &DeltaSextet, target_yaw: f64) -> (f64, [f64; 6], f64) {
    let (d, t) = (&pred.0, &target.0);
    let mut inter = [0.0; 3];
    let mut size = [0.0; 3];
    let mut tsize = [0.0; 3];
    let mut offset = [0.0; 3];
    let mut enclose = [0.0; 3];
    for k in 0..3 {
        let (a, b, ta, tb) = (d[2 * k], d[2 * k + 1], t[2 * k], t[2 * k + 1]);
        inter[k] = (a.min(ta) + b.min(tb)).max(0.0);
        size[k] = a + b;
        tsize[k] = ta + tb;
        offset[k] = (a - b) / 2.0 - (ta - tb) / 2.0;
        enclose[k] = a.max(ta) + b.max(tb);
    }
    let i: f64 = inter.iter().product();
    let v: f64 = size.iter().product();
    let tv: f64 = tsize.iter().product();
    let u = v + tv - i;
    let iou = i / u;
    let dth = yaw - target_yaw;
    let rot = (1.0 + dth.cos()) / 2.0;
    let rho2: f64 = offset.iter().map(|o| o * o).sum();
    let diag2: f64 = enclose.iter().map(|e| e * e).sum();
    let loss = 1.0 - iou * rot + rho2 / diag2;

    let d_iou = -rot;
    let d_yaw = -iou * (-dth.sin() / 2.0);
    let diou_di = (u + i) / (u * u);
    let diou_dv = -i / (u * u);
    let mut grad = [0.0; 6];
    for k in 0..3 {
        let others = |arr: &[f64; 3]| (0..3).filter(|&j| j != k).map(|j| arr[j]).product::<f64>();
        let di_dinter = others(&inter);
        let dv_dsize = others(&size);
        for side in 0..2 {
            let idx = 2 * k + side;
            let di = if inter[k] > 0.0 && d[idx] < t[idx] { di_dinter } else { 0.0 };
            let g_iou = diou_di * di + diou_dv * dv_dsize;
            let sign = if side == 0 { 1.0 } else { -1.0 };
            let drho2 = sign * offset[k];
            let ddiag2 = if d[idx] > t[idx] { 2.0 * enclose[k] } else { 0.0 };
            grad[idx] = d_iou * g_iou + drho2 / diag2 - rho2 * ddiag2 / (diag2 * diag2);
        }
    }
    (loss, grad, d_yaw)
}

/// Unnormalised per-stage sums and their gradients, scaled by `scale` per term.
struct StageTerms {
    cls: f64,
    reg: f64,
    ctr: f64,
    num_positive: usize,
}

fn stage_terms(
    preds: &StagePredictions,
    assign: &Assignment,
    gts: &[LabeledBox],
    grad_scale: Option<(f64, &mut StageGrads)>,
) -> StageTerms {
    let m = preds.cls_logits.rows();
    let k = preds.cls_logits.cols();
    let npos = assign.num_positive();
    let norm = 1.0 / npos.max(1) as f64;
    let mut grads = grad_scale;
    let (mut cls, mut reg, mut ctr) = (0.0, 0.0, 0.0);
    for i in 0..m {
        let label = assign.gt[i].map(|g| gts[g].label);
        let row = preds.cls_logits.row(i);
        for (c, &z) in row.iter().enumerate().take(k) {
            let (l, g) = focal_loss(z, label == Some(c));
            cls += l;
            if let Some((s, sg)) = grads.as_mut() {
                sg.cls_logits.row_mut(i)[c] += *s * LAMBDA_CLS * norm * g;
            }
        }
        if let (Some(g), Some(target)) = (assign.gt[i], &assign.deltas[i]) {
            let (l, gd, gy) = regression_loss(&preds.deltas[i], preds.yaw[i], target, gts[g].bbox.yaw);
            reg += l;
            let (lc, gc) = bce_with_logits(preds.ctr_logits[i], assign.centerness[i]);
            ctr += lc;
            if let Some((s, sg)) = grads.as_mut() {
                let w = *s * LAMBDA_REG * norm;
                for (a, b) in sg.deltas[i].iter_mut().zip(gd) {
                    *a += w * b;
                }
                sg.yaw[i] += w * gy;
                sg.ctr_logits[i] += *s * LAMBDA_CTR * norm * gc;
            }
        }
    }
    StageTerms {
        cls: cls * norm,
        reg: reg * norm,
        ctr: ctr * norm,
        num_positive: npos,
    }
}

/// Loss over all stages; when `grads` is given, accumulates the gradient
/// of the weighted total into one [`StageGrads`] per stage.
pub fn total_loss(
    stages: &[(&StagePredictions, &Assignment)],
    gts: &[LabeledBox],
    mut grads: Option<&mut [StageGrads]>,
) -> LossBreakdown {
    let t = stages.len().max(1) as f64;
    let (mut cls, mut reg, mut ctr, mut npos) = (0.0, 0.0, 0.0, 0);
    for (s, (preds, assign)) in stages.iter().enumerate() {
        let g = grads.as_deref_mut().map(|g| (1.0 / t, &mut g[s]));
        let terms = stage_terms(preds, assign, gts, g);
        cls += terms.cls;
        reg += terms.reg;
        ctr += terms.ctr;
        npos += terms.num_positive;
    }
    LossBreakdown::from_terms(cls / t, reg / t, ctr / t, npos)
}
