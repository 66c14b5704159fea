use crate::geometry3d::{centerness_target, distance, encode_deltas, DeltaSextet, LabeledBox, Vec3};

/// Growth of each ground-truth box (metres) when collecting candidates, per stage.
pub const STAGE_MARGINS: [f64; 3] = [0.2, 0.1, 0.0];
/// Candidates kept per ground truth, per stage.
pub const STAGE_TOP_K: [usize; 3] = [8, 6, 4];

/// Margin and top-k of a stage; stages past the schedule reuse its last entry.
pub fn stage_schedule(stage: usize) -> (f64, usize) {
    let s = stage.min(STAGE_MARGINS.len() - 1);
    (STAGE_MARGINS[s], STAGE_TOP_K[s])
}

/// Positive query targets for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Matched ground truth per query.
    pub gt: Vec<Option<usize>>,
    /// Centerness target of each positive (0 for negatives).
    pub centerness: Vec<f64>,
    /// Face distances to the matched box, for positives.
    pub deltas: Vec<Option<DeltaSextet>>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.gt.iter().filter(|g| g.is_some()).count()
    }
}

/// Assigns queries at `coords` to ground-truth boxes for a 0-based `stage`.
///
/// A query is a candidate for a box when it lies inside the box grown by the
/// stage margin. Queries are ranked against a box by centerness target, then
/// by how far they stick out of it, then by distance to its center. A query
/// that is a candidate of several boxes belongs to the one it ranks best in
/// (ties: lower box index), and each box keeps its top-k owned candidates
/// (ties: lower query index). Boxes only enter the candidate set as the
/// margin grows after every box already in it on that ranking, and margins and
/// k shrink over the stages, so every later-stage positive is an
/// earlier-stage positive of the same box.
pub fn assign_targets(coords: &[Vec3], gts: &[LabeledBox], stage: usize) -> Assignment {
    let (margin, top_k) = stage_schedule(stage);
    let m = coords.len();
    let ctr: Vec<Vec<f64>> = gts
        .iter()
        .map(|gt| coords.iter().map(|p| centerness_target(&encode_deltas(&gt.bbox, *p))).collect())
        .collect();
    // largest distance outside any face pair, in the box frame; <= 0 inside
    let excess: Vec<Vec<f64>> = gts
        .iter()
        .map(|gt| {
            coords
                .iter()
                .map(|p| {
                    let l = gt.bbox.to_local(*p);
                    (0..3).map(|k| l[k].abs() - gt.bbox.extents[k] / 2.0).fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect();
    let dist = |g: usize, i: usize| distance(coords[i], gts[g].bbox.center);
    let rank = |i: usize, a: usize, b: usize| {
        ctr[b][i]
            .total_cmp(&ctr[a][i])
            .then(excess[a][i].max(0.0).total_cmp(&excess[b][i].max(0.0)))
            .then(dist(a, i).total_cmp(&dist(b, i)))
    };
    let owner: Vec<Option<usize>> = (0..m)
        .map(|i| {
            (0..gts.len())
                .filter(|&g| excess[g][i] <= margin)
                .min_by(|&a, &b| rank(i, a, b).then(a.cmp(&b)))
        })
        .collect();
    let mut gt = vec![None; m];
    for g in 0..gts.len() {
        let mut cand: Vec<usize> = (0..m).filter(|&i| owner[i] == Some(g)).collect();
        cand.sort_by(|&a, &b| {
            ctr[g][b]
                .total_cmp(&ctr[g][a])
                .then(excess[g][a].max(0.0).total_cmp(&excess[g][b].max(0.0)))
                .then(dist(g, a).total_cmp(&dist(g, b)))
                .then(a.cmp(&b))
        });
        for &i in cand.iter().take(top_k) {
            gt[i] = Some(g);
        }
    }
    Assignment {
        centerness: gt.iter().enumerate().map(|(i, g)| g.map_or(0.0, |g| ctr[g][i])).collect(),
        deltas: gt
            .iter()
            .zip(coords)
            .map(|(g, p)| g.map(|g| encode_deltas(&gts[g].bbox, *p)))
            .collect(),
        gt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry3d::OrientedBox3D;

    fn gt() -> LabeledBox {
        LabeledBox {
            bbox: OrientedBox3D::new([1.0, 2.0, 0.5], [2.0, 1.0, 1.0], 0.3).unwrap(),
            label: 1,
        }
    }

    #[test]
    fn center_query_is_positive_everywhere() {
        for stage in 0..3 {
            let a = assign_targets(&[[1.0, 2.0, 0.5]], &[gt()], stage);
            assert_eq!(a.gt, vec![Some(0)]);
            assert!((a.centerness[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_schedule() {
        let g = gt();
        // 0.15 m outside the +x face, in the box frame
        let local = [1.0 + 0.15, 0.0, 0.0];
        let r = crate::geometry3d::rotate_z(local, g.bbox.yaw);
        let p = [g.bbox.center[0] + r[0], g.bbox.center[1] + r[1], g.bbox.center[2]];
        assert_eq!(assign_targets(&[p], &[g], 0).gt, vec![Some(0)]);
        assert_eq!(assign_targets(&[p], &[g], 0).centerness, vec![0.0]);
        assert_eq!(assign_targets(&[p], &[g], 2).gt, vec![None]);
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let a = assign_targets(&[[0.0; 3], [1.0; 3]], &[], 0);
        assert_eq!(a.num_positive(), 0);
    }
}
