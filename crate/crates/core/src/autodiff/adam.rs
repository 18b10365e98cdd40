use super::params::ParamSet;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 3e-4;

/// Adam with bias correction. Holds one first/second moment buffer per
/// parameter of the set it was created for.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update from the gradients stored on `params`.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::ParamMismatch(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(bad) = params
            .iter()
            .find(|p| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = params.get(id).grad.clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = params.value_mut(id).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
