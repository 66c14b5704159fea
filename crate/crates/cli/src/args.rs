use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gf3d_core::config::RunConfig;
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Indoor 3D detection with graph reasoning and gated image fusion.
///
/// Set GF3D_LOG (error|warn|info|debug|trace) to change log verbosity.
#[derive(Debug, Parser)]
#[command(name = "gf3d", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a train/val split.
    Synth(SynthArgs),
    /// Train a detector on a dataset.
    Train(TrainArgs),
    /// Compute per-class AP and mAP on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Detect objects in a single scene.
    Infer(InferArgs),
}

/// Settings shared by every command that builds a config.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Decoder stages.
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override any config key; VALUE is parsed as JSON, else taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&base)
    }

    /// Applies the flag overrides on top of `base`.
    pub fn apply(&self, base: &RunConfig) -> CliResult<RunConfig> {
        let mut value = serde_json::to_value(base).expect("config serialises");
        let map = value.as_object_mut().expect("config is an object");
        let named = [
            ("seed", self.seed.map(Value::from)),
            ("stages", self.stages.map(Value::from)),
            ("lr", self.lr.map(Value::from)),
            ("epochs", self.epochs.map(Value::from)),
            ("max_steps", self.max_steps.map(Value::from)),
            ("batch_size", self.batch_size.map(Value::from)),
        ];
        for (key, v) in named {
            if let Some(v) = v {
                map.insert(key.into(), v);
            }
        }
        for kv in &self.set {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            map.insert(key.trim().into(), v);
        }
        Ok(RunConfig::from_json(&value.to_string())?)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes; scene ids start at the config seed.
    #[arg(long)]
    pub count: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint saved with optimizer state.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to run.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of detection files (`scene_XXXXX.json`) to score instead.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Which split to score.
    #[arg(long, default_value = "val", value_parser = ["train", "val", "all"])]
    pub split: String,
    /// no-grm | no-gating | point-only | single-scale-k=K; repeatable.
    #[arg(long)]
    pub ablate: Vec<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all | kernels | backbones | grm | acmt | decoder
    #[arg(long, default_value = "all")]
    pub module: String,
    /// Random instances per op.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Also print every parameter group.
    #[arg(long)]
    pub groups: bool,
    /// Deliberately break the backward pass of one op.
    #[arg(long, hide = true, value_name = "OP")]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene directory as written by `synth`.
    #[arg(long)]
    pub scene: PathBuf,
    /// Detection file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ablate: Vec<String>,
}
