use gf3d_core::config::RunConfig;
use gf3d_core::decoder::{assign_targets, Ablation, DecoderInput, STAGE_TOP_K};
use gf3d_core::geometry3d::{LabeledBox, OrientedBox3D, Vec3};
use gf3d_core::gradsuite::{run_suite, Module};
use gf3d_core::model::{Detector, PreparedScene};
use gf3d_core::synthdata::generate_scene;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Centerness written out directly in the box frame.
fn centerness_oracle(b: &OrientedBox3D, p: Vec3) -> f64 {
    let (s, c) = b.yaw.sin_cos();
    let d = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
    let local = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let mut out = 1.0;
    for k in 0..3 {
        let lo = b.extents[k] / 2.0 + local[k];
        let hi = b.extents[k] / 2.0 - local[k];
        if lo <= 0.0 || hi <= 0.0 {
            return 0.0;
        }
        out *= lo.min(hi) / lo.max(hi);
    }
    out
}

fn boxes_strategy() -> impl Strategy<Value = Vec<LabeledBox>> {
    prop::collection::vec(
        (
            -1.0..1.0f64,
            -1.0..1.0f64,
            0.3..1.0f64,
            0.4..1.5f64,
            0.4..1.5f64,
            0.4..1.2f64,
            -3.0..3.0f64,
            0..5usize,
        ),
        1..5,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(x, y, z, w, l, h, yaw, label)| LabeledBox {
                bbox: OrientedBox3D::new([x, y, z], [w, l, h], yaw).unwrap(),
                label,
            })
            .collect()
    })
}

fn queries_strategy() -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec((-1.8..1.8f64, -1.8..1.8f64, -0.2..1.8f64).prop_map(|(x, y, z)| [x, y, z]), 1..60)
}

proptest! {
    // boxes crowd a 2 m square, so most queries fall inside several of them
    #[test]
    fn later_positives_are_earlier_positives(gts in boxes_strategy(), coords in queries_strategy()) {
        let a: Vec<_> = (0..3).map(|t| assign_targets(&coords, &gts, t)).collect();
        for t in 1..3 {
            for (i, g) in a[t].gt.iter().enumerate() {
                if let Some(g) = g {
                    prop_assert_eq!(a[t - 1].gt[i], Some(*g), "query {} at stage {}", i, t);
                }
            }
        }
    }

    #[test]
    fn positives_per_box_never_exceed_k(gts in boxes_strategy(), coords in queries_strategy(), t in 0..3usize) {
        let a = assign_targets(&coords, &gts, t);
        for g in 0..gts.len() {
            prop_assert!(a.gt.iter().filter(|&&x| x == Some(g)).count() <= STAGE_TOP_K[t]);
        }
        for (i, g) in a.gt.iter().enumerate() {
            match g {
                Some(g) => {
                    let want = centerness_oracle(&gts[*g].bbox, coords[i]);
                    prop_assert!((a.centerness[i] - want).abs() < 1e-12);
                }
                None => prop_assert_eq!(a.centerness[i], 0.0),
            }
        }
    }
}

#[test]
fn last_stage_keeps_four_most_central_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let b = OrientedBox3D::new(
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.6],
            [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..1.2)],
            rng.random_range(-3.0..3.0),
        )
        .unwrap();
        let (s, c) = b.yaw.sin_cos();
        let coords: Vec<Vec3> = (0..10)
            .map(|_| {
                let l: Vec<f64> = (0..3).map(|k| b.extents[k] * rng.random_range(-0.45..0.45)).collect();
                [
                    b.center[0] + c * l[0] - s * l[1],
                    b.center[1] + s * l[0] + c * l[1],
                    b.center[2] + l[2],
                ]
            })
            .collect();
        let gts = [LabeledBox { bbox: b.clone(), label: 0 }];
        let a = assign_targets(&coords, &gts, 2);
        let mut order: Vec<usize> = (0..10).collect();
        order.sort_by(|&i, &j| centerness_oracle(&b, coords[j]).total_cmp(&centerness_oracle(&b, coords[i])));
        let mut want: Vec<usize> = order[..4].to_vec();
        want.sort();
        let got: Vec<usize> = (0..10).filter(|&i| a.gt[i] == Some(0)).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn overlapping_boxes_share_no_query() {
    let a = OrientedBox3D::new([0.0, 0.0, 0.5], [2.0, 2.0, 1.0], 0.0).unwrap();
    let b = OrientedBox3D::new([0.5, 0.0, 0.5], [2.0, 2.0, 1.0], 0.4).unwrap();
    let gts = [LabeledBox { bbox: a, label: 0 }, LabeledBox { bbox: b, label: 1 }];
    let coords: Vec<Vec3> = (0..30).map(|i| [-0.6 + 0.05 * i as f64, 0.1, 0.5]).collect();
    for t in 0..3 {
        let asg = assign_targets(&coords, &gts, t);
        for g in 0..2 {
            let n = asg.gt.iter().filter(|&&x| x == Some(g)).count();
            assert!(n <= STAGE_TOP_K[t] && n > 0, "stage {t} box {g}: {n} positives");
        }
    }
}

fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        num_queries: 24,
        channels: 16,
        image_channels: 8,
        heads: 2,
        acmt_layers: 1,
        num_points: 400,
        seed,
        ..RunConfig::default()
    }
}

#[test]
fn cascade_centers_stay_finite_and_in_bounds() {
    for seed in 0..50 {
        let cfg = small_config(seed);
        let mut det = Detector::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amount = if seed % 2 == 0 { 0.3 } else { 2.0 };
        for id in det.store.ids().collect::<Vec<_>>() {
            for v in det.store.value_mut(id).data_mut() {
                *v += amount * rng.random_range(-1.0..1.0);
            }
        }
        let scene = generate_scene(seed, &cfg.scene_spec()).unwrap();
        let prep = PreparedScene::new(&scene, &cfg).unwrap();
        let ps = &det.store;
        let (enc, _) = det.points.forward_cached(ps, &prep.pc, &prep.groups).unwrap();
        let (pyramid, _) = det.image.forward_cached(ps, &prep.raster).unwrap();
        let input = DecoderInput {
            coords: &enc.proposals.coords,
            seed_features: &enc.proposals.features,
            point_positions: &prep.pc.positions,
            point_features: &enc.point_features,
            pyramid: &pyramid,
            camera: &prep.camera,
            bounds: prep.bounds,
        };
        let (out, _) = det.decoder.forward(ps, &input, &Ablation::none()).unwrap();
        assert_eq!(out.stage_coords.len(), cfg.stages + 1);
        let (lo, hi) = prep.bounds;
        for (t, coords) in out.stage_coords.iter().enumerate() {
            for c in coords {
                for k in 0..3 {
                    assert!(c[k].is_finite(), "seed {seed} stage {t}: {c:?}");
                    assert!(c[k] >= lo[k] - 1.0 && c[k] <= hi[k] + 1.0, "seed {seed} stage {t}: {c:?}");
                }
            }
        }
    }
}

#[test]
fn single_scale_must_name_a_model_scale() {
    let cfg = small_config(0);
    let det = Detector::new(cfg.clone()).unwrap();
    let scene = generate_scene(1, &cfg.scene_spec()).unwrap();
    let prep = PreparedScene::new(&scene, &cfg).unwrap();
    let mut ab = Ablation::none();
    ab.parse_flag("single-scale-k=10").unwrap();
    assert!(det.predict(&prep, &ab).is_ok());
    let mut ab = Ablation::none();
    ab.parse_flag("single-scale-k=7").unwrap();
    let err = det.predict(&prep, &ab).unwrap_err().to_string();
    assert!(err.contains("single-scale-k=7"), "{err}");
}

#[test]
fn decoder_gradients_pass_on_a_few_seeds() {
    for o in run_suite(Module::Decoder, 3, None).unwrap() {
        assert!(o.passed(), "{} failed: {:.3e} at {}", o.op, o.max_rel_error, o.worst_param);
    }
}
