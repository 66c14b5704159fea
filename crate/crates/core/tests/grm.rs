use gf3d_core::geometry3d::Vec3;
use gf3d_core::grm::{Grm, DEFAULT_SCALES};
use gf3d_core::kernels::{finite_diff_check, GradCheckOptions, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    ps: ParamStore,
    grm: Grm,
    coords: Vec<Vec3>,
    feats: Tensor,
    points: Vec<Vec3>,
    point_feats: Tensor,
}

fn fixture(seed: u64, m: usize, n: usize, c: usize, gamma: f64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let grm = Grm::new(&mut ps, "grm", c, &mut rng).unwrap();
    ps.value_mut(grm.gamma).data_mut()[0] = gamma;
    let pt = |rng: &mut ChaCha8Rng| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)];
    let coords: Vec<Vec3> = (0..m).map(|_| pt(&mut rng)).collect();
    let points: Vec<Vec3> = (0..n).map(|_| pt(&mut rng)).collect();
    let feats = Tensor::new(&[m, c], (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let point_feats = Tensor::new(&[n, c], (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    Fixture {
        ps,
        grm,
        coords,
        feats,
        points,
        point_feats,
    }
}

fn run(f: &Fixture, feats: &Tensor) -> Tensor {
    f.grm
        .forward(&f.ps, &f.coords, feats, &f.points, &f.point_feats, &DEFAULT_SCALES)
        .unwrap()
        .0
        .features
}

#[test]
fn zero_gate_is_identity() {
    let f = fixture(1, 12, 40, 8, 0.0);
    let out = run(&f, &f.feats);
    assert_eq!(out, f.feats);
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..4 {
        let (m, n, c) = (9, 30, 4);
        let mut f = fixture(seed, m, n, c, 0.5);
        let feats_id = f.ps.register("input.feats", f.feats.clone()).unwrap();
        let points_id = f.ps.register("input.points", f.point_feats.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let probe: Vec<f64> = (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grm = f.grm.clone();
        let coords = f.coords.clone();
        let points = f.points.clone();
        let scales = [2, 4, 8];
        let loss = |ps: &ParamStore| {
            let (out, _) = grm.forward(ps, &coords, ps.value(feats_id), &points, ps.value(points_id), &scales)?;
            Ok(out.features.data().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>())
        };

        let (out, cache) = grm
            .forward(&f.ps, &coords, f.ps.value(feats_id), &points, f.ps.value(points_id), &scales)
            .unwrap();
        assert!(!out.degenerate);
        let mut grads = f.ps.grads_like();
        let d_out = Tensor::new(&[m, c], probe.clone()).unwrap();
        let (d_feats, d_points) = grm.backward(&f.ps, &cache, &d_out, &mut grads);
        grads.get_mut(feats_id).add_assign(&d_feats);
        grads.get_mut(points_id).add_assign(&d_points);

        let opts = GradCheckOptions {
            max_entries: Some(12),
            seed,
        };
        let report = finite_diff_check("grm", &mut f.ps, &grads, opts, loss).unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {:?}", report.worst());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permutation_equivariant(seed in 0u64..1000, shift in 1usize..11) {
        let f = fixture(seed, 12, 48, 6, 0.7);
        let m = f.coords.len();
        let perm: Vec<usize> = (0..m).map(|i| (i * 5 + shift) % m).collect();
        let out = run(&f, &f.feats);
        let pf = Fixture {
            coords: perm.iter().map(|&i| f.coords[i]).collect(),
            feats: f.feats.gather_rows(&perm),
            ps: f.ps.clone(),
            grm: f.grm.clone(),
            points: f.points.clone(),
            point_feats: f.point_feats.clone(),
        };
        let pout = run(&pf, &pf.feats);
        prop_assert_eq!(pout, out.gather_rows(&perm));
    }

    #[test]
    fn translation_invariant(seed in 0u64..1000, t in prop::array::uniform3(-5.0f64..5.0)) {
        let f = fixture(seed, 12, 48, 6, 0.7);
        let out = run(&f, &f.feats);
        let mv = |p: &Vec3| [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        let tf = Fixture {
            coords: f.coords.iter().map(mv).collect(),
            points: f.points.iter().map(mv).collect(),
            feats: f.feats.clone(),
            ps: f.ps.clone(),
            grm: f.grm.clone(),
            point_feats: f.point_feats.clone(),
        };
        let tout = run(&tf, &tf.feats);
        prop_assert!(tout.max_abs_diff(&out) < 1e-9);
    }
}

#[test]
fn switched_off_branches_get_no_gradient() {
    let f = fixture(7, 14, 50, 6, 0.8);
    let scales = [2, 4, 8];
    let all = f
        .grm
        .forward_masked(&f.ps, &f.coords, &f.feats, &f.points, &f.point_feats, &scales, [true; 3])
        .unwrap()
        .0
        .features;
    let plain = f.grm.forward(&f.ps, &f.coords, &f.feats, &f.points, &f.point_feats, &scales).unwrap().0.features;
    assert_eq!(all, plain);

    let (out, cache) = f
        .grm
        .forward_masked(&f.ps, &f.coords, &f.feats, &f.points, &f.point_feats, &scales, [false, true, false])
        .unwrap();
    assert!(out.features.max_abs_diff(&plain) > 1e-6);
    let mut grads = f.ps.grads_like();
    let d_out = Tensor::new(&[14, 6], vec![1.0; 14 * 6]).unwrap();
    f.grm.backward(&f.ps, &cache, &d_out, &mut grads);
    for id in f.ps.ids() {
        let name = f.ps.name(id);
        let norm: f64 = grads.get(id).data().iter().map(|v| v.abs()).sum();
        if name.contains(".scale0.") || name.contains(".scale2.") {
            assert_eq!(norm, 0.0, "{name}");
        } else if name.contains(".scale1.") {
            assert!(norm > 0.0, "{name}");
        }
    }
}
