use std::collections::BTreeMap;

use gf3d_core::evalkit::{
    average_precision, map_at_iou, match_detections, read_detections, sort_detections, write_detections, Detection,
    EvalScene, DEFAULT_THRESHOLDS,
};
use gf3d_core::geometry3d::{rotated_iou3d, LabeledBox, OrientedBox3D};
use proptest::prelude::*;

fn cube(x: f64, y: f64) -> OrientedBox3D {
    OrientedBox3D::new([x, y, 0.0], [1.0; 3], 0.0).unwrap()
}

fn det(bbox: OrientedBox3D, label: usize, score: f64, scene_id: u64) -> Detection {
    Detection {
        bbox,
        label,
        score,
        scene_id,
    }
}

/// Tries every injective det -> GT assignment (dets may stay unmatched) and
/// keeps the one whose IoU sequence, read in score order, is largest
/// lexicographically; an unmatched det counts as -1.
fn exhaustive_flags(dets: &[Detection], gts: &[OrientedBox3D], thresh: f64) -> Vec<bool> {
    fn go(
        i: usize,
        iou: &[Vec<f64>],
        thresh: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<(f64, bool)>,
        best: &mut Option<Vec<(f64, bool)>>,
    ) {
        if i == iou.len() {
            let better = match best {
                None => true,
                Some(b) => cur.iter().map(|c| c.0).partial_cmp(b.iter().map(|c| c.0)) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push((-1.0, false));
        go(i + 1, iou, thresh, used, cur, best);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && iou[i][g] >= thresh {
                used[g] = true;
                cur.push((iou[i][g], true));
                go(i + 1, iou, thresh, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let iou: Vec<Vec<f64>> = dets.iter().map(|d| gts.iter().map(|g| rotated_iou3d(&d.bbox, g)).collect()).collect();
    let mut best = None;
    go(0, &iou, thresh, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    best.unwrap().into_iter().map(|c| c.1).collect()
}

fn greedy(dets: &[Detection], gts: &[OrientedBox3D], thresh: f64) -> Vec<bool> {
    let map = BTreeMap::from([(0u64, gts.to_vec())]);
    match_detections(dets, &map, thresh)
}

#[test]
fn three_dets_two_gts_layout() {
    // det 0 overlaps both boxes but the right one more; det 1 only the right one
    let gts = [cube(0.0, 0.0), cube(0.8, 0.0)];
    let dets = [det(cube(0.55, 0.0), 0, 0.9, 0), det(cube(0.9, 0.0), 0, 0.8, 0), det(cube(0.1, 0.0), 0, 0.7, 0)];
    for t in [0.1, 0.25, 0.5] {
        assert_eq!(greedy(&dets, &gts, t), exhaustive_flags(&dets, &gts, t), "thresh {t}");
    }
    assert_eq!(greedy(&dets, &gts, 0.25), vec![true, false, true]);
}

#[test]
fn ap_fixtures() {
    assert_eq!(average_precision(&[true], 1).ap, 1.0);
    assert_eq!(average_precision(&[true, false], 1).ap, 1.0);
    assert_eq!(average_precision(&[false, true], 1).ap, 0.5);
}

#[test]
fn five_scene_table() {
    // unit cubes: identical -> IoU 1, offset by 0.5 -> 1/3, far apart -> 0
    let scenes = vec![
        EvalScene {
            scene_id: 0,
            gts: vec![LabeledBox { bbox: cube(0.0, 0.0), label: 0 }],
            detections: vec![det(cube(0.0, 0.0), 0, 0.9, 0), det(cube(0.0, 0.0), 0, 0.6, 0)],
        },
        EvalScene {
            scene_id: 1,
            gts: vec![LabeledBox { bbox: cube(5.0, 0.0), label: 0 }],
            detections: vec![det(cube(5.5, 0.0), 0, 0.8, 1)],
        },
        EvalScene {
            scene_id: 2,
            gts: vec![LabeledBox { bbox: cube(0.0, 5.0), label: 0 }],
            detections: vec![det(cube(0.0, 5.0), 0, 0.5, 2), det(cube(0.0, 0.0), 2, 0.9, 2)],
        },
        EvalScene {
            scene_id: 3,
            gts: vec![LabeledBox { bbox: cube(0.0, 0.0), label: 1 }],
            detections: vec![det(cube(9.0, 9.0), 0, 0.7, 3), det(cube(0.0, 0.0), 1, 0.4, 3)],
        },
        EvalScene {
            scene_id: 4,
            gts: vec![LabeledBox { bbox: cube(3.0, 3.0), label: 1 }],
            detections: vec![det(cube(3.0, 3.0), 1, 0.95, 4), det(cube(0.0, 0.0), 1, 0.3, 4)],
        },
    ];
    let r = map_at_iou(&scenes, 3, &DEFAULT_THRESHOLDS);
    // class 0 at 0.25: T T F F T over 3 GTs -> 1/3 + 1/3 + 1/3 * 3/5
    // class 0 at 0.5:  T F F F T            -> 1/3 + 1/3 * 2/5
    // class 1: T T F over 2 GTs -> 1; class 2 has no GT
    let want = [(13.0 / 15.0, 14.0 / 15.0), (7.0 / 15.0, 11.0 / 15.0)];
    for (t, (ap0, map)) in r.thresholds.iter().zip(want) {
        let ap = &t.per_class_ap;
        assert!((ap[0].unwrap() - ap0).abs() < 1e-12, "{t:?}");
        assert_eq!(ap[1], Some(1.0));
        assert_eq!(ap[2], None);
        assert!((t.map - map).abs() < 1e-12, "{t:?}");
    }
}

#[test]
fn detection_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene_00007.json");
    let dets = vec![
        det(OrientedBox3D::new([0.1, 1.0 / 3.0, 0.7], [0.4, 1.1, 0.9], -1.3).unwrap(), 2, 0.875, 7),
        det(cube(1.0, 2.0), 0, 0.1, 7),
    ];
    write_detections(&path, 7, &dets, Some(&serde_json::json!({"lr": 0.001}))).unwrap();
    assert_eq!(read_detections(&path).unwrap(), (7, dets));
    std::fs::write(&path, r#"{"scene_id": 7, "detections": [[0,0,0,1,1,1,0,0,1.5]]}"#).unwrap();
    let msg = read_detections(&path).unwrap_err().to_string();
    assert!(msg.contains("detections[0]"), "{msg}");
}

fn crowded() -> impl Strategy<Value = (Vec<OrientedBox3D>, Vec<(OrientedBox3D, f64)>)> {
    let bx = (-0.8..0.8f64, -0.8..0.8f64, -0.3..0.3f64, 0.6..1.4f64, 0.6..1.4f64, -1.6..1.6f64)
        .prop_map(|(x, y, z, w, l, yaw)| OrientedBox3D::new([x, y, z], [w, l, 1.0], yaw).unwrap());
    (
        prop::collection::vec(bx.clone(), 0..=5),
        prop::collection::vec((bx, 0.0..1.0f64), 0..=5),
    )
}

fn sorted_dets(raw: &[(OrientedBox3D, f64)]) -> Vec<Detection> {
    let mut d: Vec<Detection> = raw.iter().map(|(b, s)| det(*b, 0, *s, 0)).collect();
    sort_detections(&mut d);
    d
}

/// Boxes on a coarse grid, each detection near exactly one of them.
fn separated() -> impl Strategy<Value = (Vec<LabeledBox>, Vec<Detection>)> {
    (1usize..6, prop::collection::vec((0usize..6, -0.6..0.6f64, -0.6..0.6f64, 0.0..1.0f64, 0usize..2), 0..10)).prop_map(
        |(n, raw)| {
            let gts: Vec<LabeledBox> = (0..n)
                .map(|i| LabeledBox {
                    bbox: cube(4.0 * i as f64, 0.0),
                    label: i % 2,
                })
                .collect();
            let dets = raw
                .into_iter()
                .map(|(i, dx, dy, s, label)| det(cube(4.0 * i as f64 + dx, dy), label, s, 0))
                .collect();
            (gts, dets)
        },
    )
}

fn ap(gts: &[LabeledBox], dets: &[Detection]) -> Vec<f64> {
    let scene = EvalScene {
        scene_id: 0,
        detections: dets.to_vec(),
        gts: gts.to_vec(),
    };
    let r = map_at_iou(&[scene], 2, &DEFAULT_THRESHOLDS);
    r.thresholds.iter().flat_map(|t| t.per_class_ap.iter().map(|a| a.unwrap_or(0.0))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn greedy_matches_exhaustive((gts, raw) in crowded(), t in prop::sample::select(vec![0.1, 0.25, 0.5])) {
        let dets = sorted_dets(&raw);
        prop_assert_eq!(greedy(&dets, &gts, t), exhaustive_flags(&dets, &gts, t));
    }

    #[test]
    fn ranking_only((gts, dets) in separated()) {
        let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 0.5 + 0.1, ..*d }).collect();
        prop_assert_eq!(ap(&gts, &dets), ap(&gts, &squashed));
    }

    #[test]
    fn looser_threshold_never_lowers_ap((gts, dets) in separated()) {
        let a = ap(&gts, &dets);
        prop_assert!(a[0] >= a[2] && a[1] >= a[3], "{:?}", a);
    }

    #[test]
    fn lower_scored_duplicates_never_help((gts, dets) in separated(), f in 0.0..1.0f64) {
        let mut doubled = dets.clone();
        doubled.extend(dets.iter().map(|d| Detection { score: d.score * f, ..*d }));
        let (a, b) = (ap(&gts, &dets), ap(&gts, &doubled));
        for k in 0..a.len() {
            prop_assert!(b[k] <= a[k] + 1e-12, "{:?} -> {:?}", a, b);
        }
    }

    #[test]
    fn ap_stays_in_unit_interval(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let n = flags.iter().filter(|&&f| f).count() + extra;
        let c = average_precision(&flags, n);
        if n > 0 {
            prop_assert!((0.0..=1.0).contains(&c.ap));
            prop_assert!(c.points.windows(2).all(|w| w[0].0 <= w[1].0));
        }
    }
}
