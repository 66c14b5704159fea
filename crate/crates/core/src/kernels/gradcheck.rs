use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// One-sided slopes that differ by more than this fraction of their size
/// mean the central difference straddles a kink (ReLU, max, bilinear cell
/// edge).
pub const KINK_RATIO: f64 = 1e-4;

/// `|a − n| / max(1e−8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    /// Probed entries whose step straddled a kink.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e)| (n.as_str(), *e))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Probe at most this many entries of each tensor (all when `None`).
    pub max_entries: Option<usize>,
    /// Seed for choosing which entries to probe.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            max_entries: None,
            seed: 0,
        }
    }
}

/// Checks `analytic` against central differences of `f` at the current
/// parameter values. `f` must be deterministic.
pub fn finite_diff_check<F>(
    op: &str,
    store: &mut ParamStore,
    analytic: &Grads,
    opts: GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let base = f(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: format!("gradcheck `{op}` at base point"),
        });
    }
    let ids: Vec<_> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel_error: f64 = 0.0;
    let mut kinks = 0;
    for id in ids {
        let n = store.value(id).numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for e in entries {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + FD_STEP;
            let fp = f(store)?;
            store.value_mut(id).data_mut()[e] = orig - FD_STEP;
            let fm = f(store)?;
            store.value_mut(id).data_mut()[e] = orig;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradcheck `{op}` perturbing {}[{e}]", store.name(id)),
                });
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.get(id).data()[e];
            let mut err = relative_error(a, numeric);
            // Near a kink only the slope on one side is meaningful; the
            // analytic gradient must match one of them.
            let (fwd, bwd) = ((fp - base) / FD_STEP, (base - fm) / FD_STEP);
            if (fwd - bwd).abs() > KINK_RATIO * (fwd.abs() + bwd.abs()).max(1e-8) {
                let one_sided = relative_error(a, fwd).min(relative_error(a, bwd));
                if one_sided < err {
                    kinks += 1;
                    err = one_sided;
                }
            }
            worst = worst.max(err);
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error,
        per_param,
        kinks,
    })
}
