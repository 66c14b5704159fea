use gf3d_core::config::RunConfig;
use gf3d_core::Error;
use proptest::prelude::*;

#[test]
fn unknown_key_is_named() {
    let msg = RunConfig::from_json(r#"{"lr": 0.001, "learnign_rate": 3}"#).unwrap_err().to_string();
    assert!(msg.contains("learnign_rate"), "{msg}");
}

#[test]
fn file_errors_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"stages": 0}"#).unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let msg = err.to_string();
    assert!(msg.contains("run.json") && msg.contains("stages"), "{msg}");
    assert!(matches!(RunConfig::load(&dir.path().join("missing.json")), Err(Error::Io { .. })));
}

#[test]
fn partial_files_fill_in_defaults() {
    let c = RunConfig::from_json(r#"{"stages": 1, "max_steps": 40}"#).unwrap();
    assert_eq!(c.stages, 1);
    assert_eq!(c.max_steps, Some(40));
    assert_eq!(RunConfig { stages: 3, max_steps: None, ..c }, RunConfig::default());
}

proptest! {
    #[test]
    fn json_round_trip_is_exact(
        lr in 1e-6f64..1.0,
        wd in 0.0f64..0.1,
        decay in 0.01f64..1.0,
        stages in 1usize..4,
        seed in any::<u64>(),
        frac in 0.05f64..0.95,
    ) {
        let c = RunConfig {
            lr,
            weight_decay: wd,
            lr_decay: decay,
            stages,
            seed,
            train_fraction: frac,
            ..RunConfig::default()
        };
        prop_assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn lr_only_shrinks(epoch in 0usize..40) {
        let c = RunConfig::default();
        prop_assert!(c.lr_at_epoch(epoch + 1) <= c.lr_at_epoch(epoch));
        prop_assert!(c.lr_at_epoch(epoch) <= c.lr);
    }
}
