use gf3d_core::kernels::{
    cosine_sim, finite_diff_check, softmax, GradCheckOptions, Init, LayerNorm, LayerSpec, Linear, Mlp, ParamStore,
    Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn linear_gradients_seed_7() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "lin", 6, 4, Init::Uniform, &mut rng).unwrap();
    for id in ps.ids().collect::<Vec<_>>() {
        let shape = ps.value(id).shape().to_vec();
        ps.set_value(id, rand_tensor(&mut rng, &shape)).unwrap();
    }
    let x = ps.register("x", rand_tensor(&mut rng, &[5, 6])).unwrap();
    let probe = rand_tensor(&mut rng, &[5, 4]);
    let mut grads = ps.grads_like();
    let dx = lin.backward(&ps, ps.value(x), &probe, &mut grads);
    grads.get_mut(x).add_assign(&dx);
    let report = finite_diff_check("linear", &mut ps, &grads, GradCheckOptions::default(), |ps| {
        Ok(dot(&lin.forward(ps, ps.value(x))?, &probe))
    })
    .unwrap();
    assert!(report.passes(1e-6), "{:?}", report.worst());
}

#[test]
fn two_layer_net_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mlp = Mlp::new(&mut ps, "mlp", 4, &[LayerSpec::hidden(8), LayerSpec::output(3)], Init::Uniform, &mut rng).unwrap();
        let x = ps.register("x", rand_tensor(&mut rng, &[6, 4])).unwrap();
        let probe = rand_tensor(&mut rng, &[6, 3]);
        let (_, cache) = mlp.forward_cached(&ps, ps.value(x)).unwrap();
        let mut grads = ps.grads_like();
        let dx = mlp.backward(&ps, &cache, &probe, &mut grads);
        grads.get_mut(x).add_assign(&dx);
        let report = finite_diff_check("mlp", &mut ps, &grads, GradCheckOptions::default(), |ps| {
            Ok(dot(&mlp.forward(ps, ps.value(x))?, &probe))
        })
        .unwrap();
        assert!(report.passes(1e-6), "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    let ln = LayerNorm::new(&mut ps, "ln", 5).unwrap();
    for id in ps.ids().collect::<Vec<_>>() {
        let shape = ps.value(id).shape().to_vec();
        ps.set_value(id, rand_tensor(&mut rng, &shape)).unwrap();
    }
    let x = ps.register("x", rand_tensor(&mut rng, &[4, 5])).unwrap();
    let probe = rand_tensor(&mut rng, &[4, 5]);
    let (_, cache) = ln.forward_cached(&ps, ps.value(x)).unwrap();
    let mut grads = ps.grads_like();
    let dx = ln.backward(&ps, &cache, &probe, &mut grads);
    grads.get_mut(x).add_assign(&dx);
    let report = finite_diff_check("layernorm", &mut ps, &grads, GradCheckOptions::default(), |ps| {
        Ok(dot(&ln.forward(ps, ps.value(x))?, &probe))
    })
    .unwrap();
    assert!(report.passes(1e-5), "{:?}", report.worst());
}

#[test]
fn softmax_examples() {
    let s = softmax(&Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap(), 1);
    assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    let s = softmax(&Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap(), 1);
    assert_eq!(s.data(), &[1.0, 0.0]);
    assert_eq!(cosine_sim(&[0.0; 3], &[1.0, 2.0, 3.0]), 0.0);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = v.len();
        let s = softmax(&Tensor::new(&[1, n], v).unwrap(), 1);
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        let c = cosine_sim(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }
}
