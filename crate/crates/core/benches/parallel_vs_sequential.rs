use criterion::{criterion_group, criterion_main, Criterion};
use gf3d_core::config::RunConfig;
use gf3d_core::decoder::Ablation;
use gf3d_core::model::{Detector, PreparedScene};
use gf3d_core::synthdata::generate_scene;
use gf3d_core::Execution;

fn setup() -> (Detector, Vec<PreparedScene>) {
    let cfg = RunConfig {
        num_points: 1024,
        ..RunConfig::default()
    };
    let scenes: Vec<_> = (1..5).map(|id| generate_scene(id, &cfg.scene_spec()).unwrap()).collect();
    let prepared = PreparedScene::prepare_all(&scenes, &cfg, Execution::Sequential).unwrap();
    (Detector::new(cfg).unwrap(), prepared)
}

fn bench(c: &mut Criterion) {
    let (det, scenes) = setup();
    let batch: Vec<&PreparedScene> = scenes.iter().collect();

    let mut g = c.benchmark_group("batch_loss_and_grads");
    g.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        g.bench_function(name, |b| b.iter(|| det.batch_loss_and_grads(&batch, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        g.bench_function(name, |b| b.iter(|| det.evaluate(&scenes, &Ablation::none(), exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
