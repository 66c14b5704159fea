//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::kernels::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    /// Steps taken so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(ps: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = ps.iter().map(|(_, t)| Tensor::zeros_like(t)).collect();
        Self {
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that restored moments line up with `ps`.
    pub fn check_shapes(&self, ps: &ParamStore) -> Result<()> {
        if self.m.len() != ps.len() || self.v.len() != ps.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        for (((name, t), m), v) in ps.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for `{name}`")));
            }
        }
        Ok(())
    }

    /// One update from the gradients stored in `ps`.
    pub fn step(&mut self, ps: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let (value, grad) = ps.value_and_grad_mut(id);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + EPS);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let id = ps.register("w", Tensor::from_parts(vec![2], vec![1.0, -2.0])).unwrap();
        let mut g = ps.grads_like();
        g.get_mut(id).data_mut().copy_from_slice(&[0.5, -3.0]);
        ps.accumulate(&g);
        let mut opt = AdamW::new(&ps, 0.0);
        opt.step(&mut ps, 0.1);
        let w = ps.value(id).data();
        // bias-corrected first step is lr * sign(g)
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let mut ps = ParamStore::new();
        let id = ps.register("w", Tensor::from_parts(vec![1], vec![2.0])).unwrap();
        let mut opt = AdamW::new(&ps, 0.5);
        opt.step(&mut ps, 0.1);
        assert!((ps.value(id).data()[0] - 1.9).abs() < 1e-12);
    }
}
