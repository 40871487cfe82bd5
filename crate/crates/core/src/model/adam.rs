//! Adam optimizer with bias correction.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{real, Gradients, ModelConfig, ModelError, ModelParams, Real};

/// Optimizer hyperparameters; defaults are the standard Adam settings,
/// surfaced as CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per learnable array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    pub step: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: &ModelConfig) -> Self {
        let shapes: Vec<_> = config
            .array_shapes()
            .into_iter()
            .take(super::LEARNABLE_COUNT)
            .map(|(_, s)| s)
            .collect();
        Self {
            step: 0,
            m: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
        }
    }

    /// One update: `p ← p − lr·m̂ / (√v̂ + ε)` with bias-corrected moments.
    ///
    /// Rejects non-finite gradients before touching any state, so an abort
    /// leaves parameters and moments at their last good values.
    pub fn step(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &Gradients<F>,
        config: &AdamConfig,
    ) -> Result<(), ModelError> {
        if !grads.all_finite() {
            return Err(ModelError::NonFiniteGradient("adam step"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = real::<F>(1.0 / (1.0 - config.beta1.powi(t)));
        let c2 = real::<F>(1.0 / (1.0 - config.beta2.powi(t)));
        let lr = real::<F>(config.lr);
        let b1 = real::<F>(config.beta1);
        let b2 = real::<F>(config.beta2);
        let eps = real::<F>(config.eps);
        let one = F::one();

        for ((mut p, g), (m, v)) in params
            .learnable_views_mut()
            .into_iter()
            .zip(grads.views())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape());
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m * c1;
                let v_hat = *v * c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
