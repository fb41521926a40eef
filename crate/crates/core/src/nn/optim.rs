//! AdamW with global-norm clipping, a linearly decaying learning rate, and
//! an exponential moving average of the weights.
//!
//! The update per buffer is the standard decoupled-weight-decay form:
//!
//! ```text
//! m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
//! p <- p - lr(s) * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
//! ```
//!
//! with bias-corrected `m_hat`, `v_hat` and `lr(s) = lr0 * max(0, 1 - s /
//! total_steps)`. Gradients are rescaled to global L2 norm at most
//! `clip_norm` before touching the moments. A non-finite gradient anywhere
//! rejects the whole step: parameters, moments, and the step counter stay
//! untouched.

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr0: f64,
    /// Step count at which the learning rate reaches zero.
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 1e-4,
            total_steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for 0-based step `s`.
    pub fn lr_at(&self, s: u64) -> f64 {
        self.lr0 * (1.0 - s as f64 / self.total_steps as f64).max(0.0)
    }
}

/// First/second moment buffers plus the applied-step counter.
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<T: Scalar>(params: &ParamSet<T>) -> Self {
        OptimizerState {
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn moments_at(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    pub fn set_moments(&mut self, i: usize, m: Vec<f64>, v: Vec<f64>) {
        self.m[i] = m;
        self.v[i] = v;
    }

    pub fn buffers(&self) -> usize {
        self.m.len()
    }
}

/// What a call to [`optimizer_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied { lr: f64, grad_norm: f64 },
    /// Some gradient component was NaN or infinite; nothing changed.
    RejectedNonFinite,
}

/// Applies one AdamW step using the gradients currently stored on the
/// parameter tensors. Parameters without a gradient contribute zeros.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> StepOutcome {
    let n = params.len();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sq_sum = 0.0f64;
    for i in 0..n {
        let t = params.tensor_at(i);
        let g: Vec<f64> = match t.grad() {
            Some(g) => g.iter().map(|&v| v.to_f64()).collect(),
            None => vec![0.0; t.numel()],
        };
        for &v in &g {
            sq_sum += v * v;
        }
        grads.push(g);
    }
    if !sq_sum.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
        return StepOutcome::RejectedNonFinite;
    }
    let norm = sq_sum.sqrt();
    let scale = if norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };

    let lr = config.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..n {
        let tensor = params.tensor_at(i).clone();
        let mut data: Vec<f64> = tensor.data().iter().map(|&v| v.to_f64()).collect();
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..data.len() {
            let gj = g[j] * scale;
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * data[j]);
        }
        let updated: Vec<T> = data.iter().map(|&v| T::from_f64(v)).collect();
        params.replace_at(i, Tensor::from_vec(tensor.shape().to_vec(), updated));
    }
    state.step += 1;
    StepOutcome::Applied { lr, grad_norm: norm }
}

/// Exponential moving average of the parameter buffers, kept in f64.
pub struct EmaState {
    pub beta: f64,
    shadow: Vec<Vec<f64>>,
}

impl EmaState {
    /// Starts the shadow as an exact copy of the live parameters.
    pub fn new<T: Scalar>(params: &ParamSet<T>, beta: f64) -> Self {
        EmaState {
            beta,
            shadow: params
                .iter()
                .map(|(_, t)| t.data().iter().map(|&v| v.to_f64()).collect())
                .collect(),
        }
    }

    /// `shadow <- beta * shadow + (1 - beta) * live`.
    pub fn update<T: Scalar>(&mut self, params: &ParamSet<T>) {
        for (buf, (_, t)) in self.shadow.iter_mut().zip(params.iter()) {
            for (s, &p) in buf.iter_mut().zip(t.data()) {
                *s = self.beta * *s + (1.0 - self.beta) * p.to_f64();
            }
        }
    }

    pub fn shadow_at(&self, i: usize) -> &[f64] {
        &self.shadow[i]
    }

    pub fn set_shadow(&mut self, i: usize, buf: Vec<f64>) {
        self.shadow[i] = buf;
    }

    pub fn buffers(&self) -> usize {
        self.shadow.len()
    }

    /// Materializes the shadow into a parameter set shaped like `params`.
    pub fn as_params<T: Scalar>(&self, params: &ParamSet<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (i, (name, t)) in params.iter().enumerate() {
            let data: Vec<T> = self.shadow[i].iter().map(|&v| T::from_f64(v)).collect();
            out.insert(name, Tensor::from_vec(t.shape().to_vec(), data));
        }
        out
    }
}
