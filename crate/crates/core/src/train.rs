//! Training loop: shuffled mini-batches, AdamW with step decay, periodic
//! validation and best-model tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Ablation, LossBreakdown};
use crate::error::{Error, Result};
use crate::kernels::{Grads, ParamStore};
use crate::model::{Detector, PreparedScene};
use crate::optim::AdamW;
use crate::Execution;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Validation result after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub val_map25: f64,
    pub val_map50: f64,
    pub improved: bool,
}

/// Progress that has to survive a restart.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epoch in progress (or next to start).
    pub epoch: usize,
    /// Batches of `epoch` already taken.
    pub batch: usize,
    pub step: u64,
    pub best_val_map25: Option<f64>,
}

pub fn grad_norm(g: &Grads) -> f64 {
    g.iter().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Order in which scenes are visited during `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mix = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    idx
}

pub struct Trainer {
    pub detector: Detector,
    pub optimizer: AdamW,
    pub state: TrainState,
    pub exec: Execution,
    /// Parameters of the best validated epoch so far.
    pub best: Option<ParamStore>,
}

pub enum Event<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

impl Trainer {
    pub fn new(detector: Detector, exec: Execution) -> Self {
        let optimizer = AdamW::new(&detector.store, detector.config.weight_decay);
        Self {
            detector,
            optimizer,
            state: TrainState::default(),
            exec,
            best: None,
        }
    }

    pub fn resume(detector: Detector, optimizer: AdamW, state: TrainState, exec: Execution) -> Result<Self> {
        optimizer.check_shapes(&detector.store)?;
        Ok(Self {
            detector,
            optimizer,
            state,
            exec,
            best: None,
        })
    }

    fn steps_done(&self) -> bool {
        self.detector.config.max_steps.is_some_and(|m| self.state.step >= m as u64)
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, batch: &[&PreparedScene], lr: f64) -> Result<StepRecord> {
        let (loss, mut grads) = self.detector.batch_loss_and_grads(batch, self.exec)?;
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient at step {}", self.state.step + 1),
            });
        }
        let clip = self.detector.config.grad_clip;
        if clip > 0.0 && norm > clip {
            grads.scale(clip / norm);
        }
        let store = &mut self.detector.store;
        store.zero_grad();
        store.accumulate(&grads);
        self.optimizer.step(store, lr);
        self.state.step += 1;
        Ok(StepRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            lr,
            loss,
            grad_norm: norm,
        })
    }

    /// Runs the remaining epochs (or steps). Validation runs every
    /// `eval_every` completed epochs and once more when training ends, if
    /// `val` is non-empty. Stopping on `max_steps` mid-epoch is resumable.
    pub fn fit(
        &mut self,
        train: &[PreparedScene],
        val: &[PreparedScene],
        mut on_event: impl FnMut(Event<'_>) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Input("no training scenes".into()));
        }
        let cfg = self.detector.config.clone();
        while self.state.epoch < cfg.epochs && !self.steps_done() {
            let epoch = self.state.epoch;
            let lr = cfg.lr_at_epoch(epoch);
            let order = epoch_order(train.len(), cfg.seed, epoch);
            let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            while self.state.batch < chunks.len() && !self.steps_done() {
                let batch: Vec<&PreparedScene> = chunks[self.state.batch].iter().map(|&i| &train[i]).collect();
                let rec = self.step(&batch, lr).map_err(|e| match e {
                    Error::NonFinite { context } => {
                        let ids: Vec<u64> = batch.iter().map(|s| s.scene_id).collect();
                        Error::NonFinite {
                            context: format!("{context} (epoch {epoch}, scenes {ids:?})"),
                        }
                    }
                    e => e,
                })?;
                self.state.batch += 1;
                on_event(Event::Step(&rec))?;
            }
            let epoch_done = self.state.batch == chunks.len();
            if epoch_done {
                self.state.epoch += 1;
                self.state.batch = 0;
            }
            let finished = self.state.epoch == cfg.epochs || self.steps_done();
            let scheduled = epoch_done && self.state.epoch % cfg.eval_every == 0;
            if !val.is_empty() && (scheduled || finished) {
                let rec = self.validate(val, epoch)?;
                on_event(Event::Eval(&rec))?;
            }
        }
        Ok(())
    }

    fn validate(&mut self, val: &[PreparedScene], epoch: usize) -> Result<EvalRecord> {
        let report = self.detector.evaluate(val, &Ablation::none(), self.exec)?;
        let map25 = report.map_at(0.25).unwrap_or(0.0);
        let improved = self.state.best_val_map25.is_none_or(|b| map25 > b);
        if improved {
            self.state.best_val_map25 = Some(map25);
            self.best = Some(self.detector.store.clone());
        }
        Ok(EvalRecord {
            epoch,
            step: self.state.step,
            val_map25: map25,
            val_map50: report.map_at(0.5).unwrap_or(0.0),
            improved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(10, 3, 0);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
    }
}
