use gf3d_core::backbones::farthest_point_sampling;
use gf3d_core::gradsuite::{run_suite, Module};
use proptest::prelude::*;

#[test]
fn two_clusters_get_one_seed_each() {
    let pts = [
        [0.0, 0.0, 0.0],
        [0.1, 0.0, 0.0],
        [0.0, 0.1, 0.0],
        [5.0, 5.0, 0.0],
        [5.1, 5.0, 0.0],
        [5.0, 5.1, 0.0],
    ];
    let seeds = farthest_point_sampling(&pts, 2).unwrap();
    assert_eq!(seeds.len(), 2);
    assert!(seeds.iter().any(|&i| i < 3) && seeds.iter().any(|&i| i >= 3));
    assert!(farthest_point_sampling(&pts, 7).is_err());
}

#[test]
fn backbone_gradients_pass() {
    for o in run_suite(Module::Backbones, 5, None).unwrap() {
        assert!(o.passed(), "{} failed: {:.3e} at {}", o.op, o.max_rel_error, o.worst_param);
    }
}

proptest! {
    #[test]
    fn sampling_everything_is_a_permutation(pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..40)) {
        let mut s = farthest_point_sampling(&pts, pts.len()).unwrap();
        s.sort_unstable();
        prop_assert_eq!(s, (0..pts.len()).collect::<Vec<_>>());
    }
}
