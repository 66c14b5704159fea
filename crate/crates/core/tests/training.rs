mod common;

use gf3d_core::checkpoint::Checkpoint;
use gf3d_core::config::RunConfig;
use gf3d_core::kernels::ParamStore;
use gf3d_core::model::{Detector, PreparedScene};
use gf3d_core::train::Trainer;
use gf3d_core::Execution;

use common::{scenes, tiny_config};

fn run(cfg: &RunConfig, data: &[PreparedScene], exec: Execution) -> Trainer {
    let mut t = Trainer::new(Detector::new(cfg.clone()).unwrap(), exec);
    t.fit(data, &[], |_| Ok(())).unwrap();
    t
}

fn same_bits(a: &ParamStore, b: &ParamStore) -> bool {
    a.iter()
        .zip(b.iter())
        .all(|((na, x), (nb, y))| na == nb && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[test]
fn fixed_seed_is_reproducible() {
    let cfg = RunConfig {
        max_steps: Some(4),
        ..tiny_config(1)
    };
    let data = scenes(&cfg, 1..4);
    let a = run(&cfg, &data, Execution::Sequential);
    let b = run(&cfg, &data, Execution::Sequential);
    assert!(same_bits(&a.detector.store, &b.detector.store));
    let c = run(&cfg, &data, Execution::Parallel);
    assert!(same_bits(&a.detector.store, &c.detector.store));
    let other = run(&RunConfig { seed: 2, ..cfg }, &data, Execution::Sequential);
    assert!(!same_bits(&a.detector.store, &other.detector.store));
}

#[test]
fn resume_mid_epoch_matches_uninterrupted_run() {
    // 3 scenes in batches of 2: two batches per epoch, so step 3 ends mid-epoch
    let full_cfg = RunConfig {
        max_steps: Some(5),
        ..tiny_config(3)
    };
    let data = scenes(&full_cfg, 10..13);
    let full = run(&full_cfg, &data, Execution::Sequential);

    let first = run(&RunConfig { max_steps: Some(3), ..full_cfg.clone() }, &data, Execution::Sequential);
    assert_eq!((first.state.epoch, first.state.batch), (1, 1));
    let bytes = Checkpoint::from_detector(&first.detector, first.state.clone(), Some(&first.optimizer)).to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut det = Detector::new(full_cfg.clone()).unwrap();
    ck.restore_into(&mut det.store).unwrap();
    let mut resumed = Trainer::resume(det, ck.optimizer.unwrap(), ck.state, Execution::Sequential).unwrap();
    resumed.fit(&data, &[], |_| Ok(())).unwrap();

    assert_eq!(resumed.state, full.state);
    assert!(same_bits(&resumed.detector.store, &full.detector.store));
    assert_eq!(resumed.optimizer, full.optimizer);
}

fn mean_loss(det: &Detector, data: &[PreparedScene]) -> f64 {
    data.iter().map(|s| det.loss_and_grads(s).unwrap().0.total).sum::<f64>() / data.len() as f64
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = RunConfig {
                max_steps: Some(200),
                ..tiny_config(seed)
            };
            let data = scenes(&cfg, 1..3);
            let before = mean_loss(&Detector::new(cfg.clone()).unwrap(), &data);
            let t = run(&cfg, &data, Execution::default());
            mean_loss(&t.detector, &data) / before
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 0.8, "{ratios:?}");
}

#[test]
fn steps_log_and_stop_where_asked() {
    let cfg = RunConfig {
        max_steps: Some(3),
        ..tiny_config(0)
    };
    let data = scenes(&cfg, 1..3);
    let mut steps = Vec::new();
    let mut evals = 0;
    let mut t = Trainer::new(Detector::new(cfg).unwrap(), Execution::Sequential);
    t.fit(&data, &data[..1], |e| {
        match e {
            gf3d_core::train::Event::Step(r) => steps.push(r.step),
            gf3d_core::train::Event::Eval(_) => evals += 1,
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, vec![1, 2, 3]);
    // one batch per epoch with eval_every 1, so three evaluations
    assert_eq!(evals, 3);
    assert!(t.best.is_some());
}
