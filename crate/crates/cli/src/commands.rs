use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use gf3d_core::checkpoint::Checkpoint;
use gf3d_core::config::RunConfig;
use gf3d_core::decoder::Ablation;
use gf3d_core::evalkit::{map_at_iou, read_detections, write_detections, EvalScene, MapReport, DEFAULT_THRESHOLDS};
use gf3d_core::gradsuite::{run_suite, Module, TOLERANCE};
use gf3d_core::model::{Detector, PreparedScene};
use gf3d_core::synthdata::{read_manifest, read_scene, read_scenes, write_dataset};
use gf3d_core::train::{EvalRecord, Event, StepRecord, Trainer};
use gf3d_core::{Error, Execution};
use serde::Serialize;

use crate::args::{EvalArgs, GradcheckArgs, InferArgs, SynthArgs, TrainArgs};
use crate::error::{CliError, CliResult};

/// Effective config written next to a generated dataset.
pub const DATASET_CONFIG: &str = "config.json";
pub const TRAIN_LOG: &str = "train.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const NONFINITE_DUMP: &str = "nonfinite.json";

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn parse_ablations(flags: &[String]) -> CliResult<Ablation> {
    let mut a = Ablation::none();
    for f in flags {
        a.parse_flag(f)?;
    }
    Ok(a)
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let manifest = write_dataset(&a.out, a.count, cfg.seed, &cfg.scene_spec(), cfg.train_fraction)?;
    write_text(&a.out.join(DATASET_CONFIG), &cfg.to_json())?;
    log::info!(
        "wrote {} scenes to {} ({} train, {} val)",
        a.count,
        a.out.display(),
        manifest.train.len(),
        manifest.val.len()
    );
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Config {
        config: &'a RunConfig,
        resumed_from: Option<String>,
    },
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
    Nonfinite {
        epoch: usize,
        step: u64,
        error: String,
    },
}

struct TrainLog {
    path: std::path::PathBuf,
    out: BufWriter<File>,
}

impl TrainLog {
    fn open(path: &Path, append: bool) -> CliResult<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, line: &LogLine<'_>) -> Result<(), Error> {
        let text = serde_json::to_string(line).expect("log line serialises");
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|source| Error::Io {
                path: self.path.clone(),
                source,
            })
    }
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let exec = execution(a.sequential);
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.config.is_some() {
                return Err(CliError::Usage("--config cannot be combined with --resume".into()));
            }
            let ck = Checkpoint::load(path)?;
            let cfg = a.config.apply(&ck.config)?;
            let mut det = Detector::new(cfg.clone())?;
            ck.restore_into(&mut det.store)?;
            let mut opt = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state to resume from", path.display())))?;
            opt.weight_decay = cfg.weight_decay;
            Trainer::resume(det, opt, ck.state, exec)?
        }
        None => Trainer::new(Detector::new(a.config.resolve()?)?, exec),
    };
    let cfg = trainer.detector.config.clone();

    let manifest = read_manifest(&a.data)?;
    let load = |ids: &[u64]| -> CliResult<Vec<PreparedScene>> {
        Ok(PreparedScene::prepare_all(&read_scenes(&a.data, ids)?, &cfg, exec)?)
    };
    let train_set = load(&manifest.train)?;
    let val_set = load(&manifest.val)?;
    log::info!(
        "training on {} scenes, validating on {}, {} parameters",
        train_set.len(),
        val_set.len(),
        trainer.detector.store.num_scalars()
    );

    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut log = TrainLog::open(&a.out.join(TRAIN_LOG), a.resume.is_some())?;
    log.write(&LogLine::Config {
        config: &cfg,
        resumed_from: a.resume.as_ref().map(|p| p.display().to_string()),
    })?;

    let t0 = Instant::now();
    let result = trainer.fit(&train_set, &val_set, |event| match event {
        Event::Step(r) => {
            log::debug!("step {} loss {:.5}", r.step, r.loss.total);
            log.write(&LogLine::Step(r))
        }
        Event::Eval(r) => {
            log::info!(
                "epoch {} step {}: val mAP@0.25 {:.4} mAP@0.5 {:.4} ({:.0}s)",
                r.epoch,
                r.step,
                r.val_map25,
                r.val_map50,
                t0.elapsed().as_secs_f64()
            );
            log.write(&LogLine::Eval(r))
        }
    });
    if let Err(e @ Error::NonFinite { .. }) = &result {
        let (epoch, step) = (trainer.state.epoch, trainer.state.step + 1);
        let line = LogLine::Nonfinite {
            epoch,
            step,
            error: e.to_string(),
        };
        log.write(&line)?;
        let dump = a.out.join(NONFINITE_DUMP);
        write_text(&dump, &serde_json::to_string_pretty(&line).expect("serialises"))?;
        log::error!("offending step written to {}", dump.display());
    }
    result?;

    let last = Checkpoint::from_detector(&trainer.detector, trainer.state.clone(), Some(&trainer.optimizer));
    last.save(&a.out.join(LAST_CHECKPOINT))?;
    let best_path = a.out.join(BEST_CHECKPOINT);
    match &trainer.best {
        Some(best) => Checkpoint::from_store(&cfg, best, trainer.state.clone(), None).save(&best_path)?,
        // nothing validated in this run: keep an earlier best, else use the last weights
        None if !best_path.exists() => Checkpoint { optimizer: None, ..last }.save(&best_path)?,
        None => {}
    }
    log::info!(
        "finished at step {} in {:.1}s; checkpoints in {}",
        trainer.state.step,
        t0.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config: Option<&'a RunConfig>,
    split: &'a str,
    ablations: &'a [String],
    num_scenes: usize,
    report: &'a MapReport,
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let exec = execution(a.sequential);
    let manifest = read_manifest(&a.data)?;
    let ids = match a.split.as_str() {
        "train" => manifest.train.clone(),
        "val" => manifest.val.clone(),
        _ => manifest.all(),
    };
    if ids.is_empty() {
        return Err(Error::Input(format!("split `{}` is empty", a.split)).into());
    }
    let scenes = read_scenes(&a.data, &ids)?;

    let (config, report) = match (&a.checkpoint, &a.predictions) {
        (Some(path), _) => {
            let det = Checkpoint::load(path)?.to_detector()?;
            let ablation = parse_ablations(&a.ablate)?;
            let prepared = PreparedScene::prepare_all(&scenes, &det.config, exec)?;
            let report = det.evaluate(&prepared, &ablation, exec)?;
            (Some(det.config), report)
        }
        (None, Some(dir)) => {
            if !a.ablate.is_empty() {
                return Err(CliError::Usage("--ablate needs --checkpoint".into()));
            }
            let cfg_path = a.data.join(DATASET_CONFIG);
            let num_classes = if cfg_path.exists() {
                RunConfig::load(&cfg_path)?.num_classes
            } else {
                RunConfig::default().num_classes
            };
            let mut eval_scenes = Vec::with_capacity(scenes.len());
            for s in &scenes {
                let path = dir.join(format!("scene_{:05}.json", s.scene_id));
                let (scene_id, detections) = read_detections(&path)?;
                if scene_id != s.scene_id {
                    return Err(Error::Input(format!(
                        "{} holds scene {scene_id}, expected {}",
                        path.display(),
                        s.scene_id
                    ))
                    .into());
                }
                eval_scenes.push(EvalScene {
                    scene_id,
                    detections,
                    gts: s.gts.clone(),
                });
            }
            (None, map_at_iou(&eval_scenes, num_classes, &DEFAULT_THRESHOLDS))
        }
        (None, None) => return Err(CliError::Usage("give --checkpoint or --predictions".into())),
    };

    for t in &report.thresholds {
        log::info!("mAP@{} = {:.4}", t.iou, t.map);
    }
    let out = EvalOutput {
        config: config.as_ref(),
        split: &a.split,
        ablations: &a.ablate,
        num_scenes: scenes.len(),
        report: &report,
    };
    let text = serde_json::to_string_pretty(&out).expect("report serialises");
    match &a.out {
        Some(path) => write_text(path, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let module: Module = a.module.parse()?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let t0 = Instant::now();
    let outcomes = run_suite(module, a.seeds, a.corrupt.as_deref())?;
    println!("{:<28} {:>12}  {:<46} {:>5}  result", "op", "max rel err", "worst parameter", "seed");
    for o in &outcomes {
        let verdict = if o.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<28} {:>12.3e}  {:<46} {:>5}  {verdict}",
            o.op, o.max_rel_error, o.worst_param, o.worst_seed
        );
        if a.groups {
            for (name, err) in &o.groups {
                println!("    {name:<56} {err:.3e}");
            }
        }
    }
    println!(
        "{} ops, {} seeds each, tolerance {TOLERANCE:e}, {:.1}s",
        outcomes.len(),
        a.seeds,
        t0.elapsed().as_secs_f64()
    );
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} ({} rel err {:.3e}, seed {})", o.op, o.worst_param, o.max_rel_error, o.worst_seed))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join("; ")))
    }
}

pub fn infer(a: InferArgs) -> CliResult<()> {
    let det = Checkpoint::load(&a.checkpoint)?.to_detector()?;
    let ablation = parse_ablations(&a.ablate)?;
    let scene = read_scene(&a.scene)?;
    let prepared = PreparedScene::new(&scene, &det.config)?;
    let dets = det.predict(&prepared, &ablation)?;
    let config = serde_json::to_value(&det.config).expect("config serialises");
    write_detections(&a.out, scene.scene_id, &dets, Some(&config))?;
    log::info!("{} detections for scene {} -> {}", dets.len(), scene.scene_id, a.out.display());
    Ok(())
}
