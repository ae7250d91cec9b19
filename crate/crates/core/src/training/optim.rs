//! Adam with bias correction and a warmup/linear-decay learning rate.

use crate::error::{Divergence, Error, Result};
use crate::params::{Gradients, ParameterSet};

/// Linear warmup to `peak` over `warmup` steps, then linear decay reaching
/// zero at `total`. Steps are 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    /// Warmup over `warmup_fraction` of `total`, rounded down.
    pub fn with_warmup_fraction(peak: f64, warmup_fraction: f64, total: u64) -> Self {
        Self {
            peak,
            warmup: (warmup_fraction * total as f64).floor() as u64,
            total,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step <= self.warmup {
            return self.peak * step as f64 / self.warmup.max(1) as f64;
        }
        let remaining = self.total.saturating_sub(step) as f64;
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        self.peak * remaining / span
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update at learning rate `lr`. Rejects non-finite gradients
    /// before touching any state.
    pub fn update(&mut self, params: &mut ParameterSet, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.arrays().len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} arrays, got {} gradients for {} parameters",
                self.m.len(),
                grads.arrays().len(),
                params.len()
            )));
        }
        if let Some(id) = grads.first_non_finite() {
            return Err(Error::Divergence(Divergence::Gradient(params.name(id).to_string())));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            if g.len() != self.m[i].len() {
                return Err(Error::Contract(format!("gradient shape mismatch for {}", params.name(id))));
            }
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
