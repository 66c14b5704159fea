//! Run configuration: one flat JSON document holding every hyperparameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::synthdata::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Proposals per scene.
    pub num_queries: usize,
    pub channels: usize,
    pub image_channels: usize,
    pub heads: usize,
    pub acmt_layers: usize,
    pub stages: usize,
    pub scales: [usize; 3],
    pub num_classes: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Validate (and maybe checkpoint) every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
    /// Points per generated scene.
    pub num_points: usize,
    /// Voxel edge for downsampling input clouds; 0 keeps every point.
    pub voxel_size: f64,
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_queries: 64,
            channels: 64,
            image_channels: 32,
            heads: 4,
            acmt_layers: 2,
            stages: 3,
            scales: [5, 10, 20],
            num_classes: 5,
            lr: 1e-4,
            lr_milestones: vec![8, 11],
            lr_decay: 0.1,
            weight_decay: 0.01,
            grad_clip: 10.0,
            batch_size: 4,
            epochs: 12,
            max_steps: None,
            eval_every: 1,
            seed: 0,
            num_points: 2048,
            voxel_size: 0.0,
            train_fraction: 0.8,
        }
    }
}

impl RunConfig {
    /// Loads and validates a config file. Missing keys take defaults;
    /// unknown keys are an error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("num_queries", self.num_queries),
            ("channels", self.channels),
            ("image_channels", self.image_channels),
            ("heads", self.heads),
            ("acmt_layers", self.acmt_layers),
            ("stages", self.stages),
            ("num_classes", self.num_classes),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("`{name}` must be positive"));
            }
        }
        if self.num_queries < 2 {
            return bad("`num_queries` must be at least 2".into());
        }
        if self.channels % self.heads != 0 {
            return bad(format!("`channels` {} not divisible by `heads` {}", self.channels, self.heads));
        }
        if self.scales.contains(&0) {
            return bad("`scales` must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("`lr` must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("`lr_decay` must be in (0, 1]".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("`lr_milestones` must be strictly increasing".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("`weight_decay` must be non-negative".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("`grad_clip` must be non-negative".into());
        }
        if self.max_steps == Some(0) {
            return bad("`max_steps` must be positive".into());
        }
        if !(self.voxel_size >= 0.0 && self.voxel_size.is_finite()) {
            return bad("`voxel_size` must be non-negative".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("`train_fraction` must be in (0, 1)".into());
        }
        self.scene_spec().validate()?;
        if self.num_queries > self.num_points {
            return bad("`num_queries` exceeds `num_points`".into());
        }
        Ok(())
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            channels: self.channels,
            image_channels: self.image_channels,
            num_classes: self.num_classes,
            heads: self.heads,
            acmt_layers: self.acmt_layers,
            stages: self.stages,
            scales: self.scales,
            levels: crate::backbones::NUM_LEVELS,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            num_classes: self.num_classes,
            num_points: self.num_points,
            ..SceneSpec::default()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"learning_rate": 0.1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"heads": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lr": -1}"#).is_err());
    }

    #[test]
    fn step_schedule() {
        let c = RunConfig::default();
        assert_eq!(c.lr_at_epoch(7), 1e-4);
        assert!((c.lr_at_epoch(8) - 1e-5).abs() < 1e-20);
        assert!((c.lr_at_epoch(11) - 1e-6).abs() < 1e-20);
    }
}
