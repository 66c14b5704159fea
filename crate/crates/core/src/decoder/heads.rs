use rand::Rng;

use crate::error::Result;
use crate::geometry3d::DeltaSextet;
use crate::kernels::{sigmoid, softplus, Grads, Init, LayerSpec, Mlp, MlpCache, ParamStore, Tensor};

/// Classification bias at init, so that `σ(b) ≈ 0.01`.
pub const CLS_PRIOR_BIAS: f64 = -4.6;
/// Floor on the yaw vector length in `atan2` gradients.
const YAW_NORM_FLOOR: f64 = 1e-12;

/// Classification, regression and centerness heads of one decoder stage.
#[derive(Clone, Debug)]
pub struct StageHeads {
    pub num_classes: usize,
    pub cls: Mlp,
    pub reg: Mlp,
    pub ctr: Mlp,
}

/// Raw and decoded outputs of one stage.
#[derive(Clone, Debug)]
pub struct StagePredictions {
    pub cls_logits: Tensor,
    /// `[M, 8]`: six raw face distances then `(sin, cos)`.
    pub reg_raw: Tensor,
    pub deltas: Vec<DeltaSextet>,
    pub yaw: Vec<f64>,
    pub ctr_logits: Vec<f64>,
}

pub struct HeadsCache {
    cls: MlpCache,
    reg: MlpCache,
    ctr: MlpCache,
}

/// Upstream gradients for the decoded stage outputs.
#[derive(Clone, Debug)]
pub struct StageGrads {
    pub cls_logits: Tensor,
    pub deltas: Vec<[f64; 6]>,
    pub yaw: Vec<f64>,
    pub ctr_logits: Vec<f64>,
}

impl StageGrads {
    pub fn zeros(m: usize, num_classes: usize) -> Self {
        Self {
            cls_logits: Tensor::zeros(&[m, num_classes]),
            deltas: vec![[0.0; 6]; m],
            yaw: vec![0.0; m],
            ctr_logits: vec![0.0; m],
        }
    }
}

impl StageHeads {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mlp = |store: &mut ParamStore, part: &str, out: usize, rng: &mut _| {
            Mlp::new(
                store,
                &format!("{name}.{part}"),
                c,
                &[LayerSpec::hidden(c), LayerSpec::output(out)],
                Init::Uniform,
                rng,
            )
        };
        let heads = Self {
            num_classes,
            cls: mlp(store, "cls", num_classes, rng)?,
            reg: mlp(store, "reg", 8, rng)?,
            ctr: mlp(store, "ctr", 1, rng)?,
        };
        if let Some(b) = heads.cls.linears().last().and_then(|l| l.bias) {
            store.value_mut(b).fill(CLS_PRIOR_BIAS);
        }
        if let Some(b) = heads.reg.linears().last().and_then(|l| l.bias) {
            // start with yaw vector (0, 1), i.e. yaw 0
            store.value_mut(b).data_mut()[7] = 1.0;
        }
        Ok(heads)
    }

    pub fn forward(&self, ps: &ParamStore, features: &Tensor) -> Result<(StagePredictions, HeadsCache)> {
        let (cls_logits, cls) = self.cls.forward_cached(ps, features)?;
        let (reg_raw, reg) = self.reg.forward_cached(ps, features)?;
        let (ctr_t, ctr) = self.ctr.forward_cached(ps, features)?;
        let m = features.rows();
        let mut deltas = Vec::with_capacity(m);
        let mut yaw = Vec::with_capacity(m);
        for i in 0..m {
            let r = reg_raw.row(i);
            deltas.push(DeltaSextet(std::array::from_fn(|k| softplus(r[k]))));
            yaw.push(r[6].atan2(r[7]));
        }
        Ok((
            StagePredictions {
                cls_logits,
                reg_raw,
                deltas,
                yaw,
                ctr_logits: ctr_t.into_data(),
            },
            HeadsCache { cls, reg, ctr },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        preds: &StagePredictions,
        cache: &HeadsCache,
        g: &StageGrads,
        grads: &mut Grads,
    ) -> Tensor {
        let m = preds.reg_raw.rows();
        let mut d_reg = Tensor::zeros(&[m, 8]);
        for i in 0..m {
            let r = preds.reg_raw.row(i);
            let d = d_reg.row_mut(i);
            for k in 0..6 {
                d[k] = g.deltas[i][k] * sigmoid(r[k]);
            }
            let (s, c) = (r[6], r[7]);
            let n2 = (s * s + c * c).max(YAW_NORM_FLOOR);
            d[6] = g.yaw[i] * c / n2;
            d[7] = -g.yaw[i] * s / n2;
        }
        let d_ctr = Tensor::from_parts(vec![m, 1], g.ctr_logits.clone());
        let mut dx = self.cls.backward(ps, &cache.cls, &g.cls_logits, grads);
        dx.add_assign(&self.reg.backward(ps, &cache.reg, &d_reg, grads));
        dx.add_assign(&self.ctr.backward(ps, &cache.ctr, &d_ctr, grads));
        dx
    }
}
