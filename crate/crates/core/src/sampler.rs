//! ODE-based sampling: a noise-level schedule mapped to flow time, and
//! fixed-step plus adaptive integrators that carry a latent volume from
//! noise (t = 0) to data (t = 1) along the learned velocity field.
//!
//! The schedule follows the rho-warped geometric family
//! `sigma_i = (sigma_max^(1/rho) + i/(N-1) (sigma_min^(1/rho) -
//! sigma_max^(1/rho)))^rho`, converted to flow time via `t = 1/(1+sigma)`
//! and augmented with exact 0 and 1 endpoints. Integration state is kept
//! in f64 regardless of the model precision; grid nodes are hit exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{standard_normal, time_channels};
use crate::nn::{NnError, UNet};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("step size underflow at t = {t}; the velocity field is too rough")]
    StepUnderflow { t: f64 },
    #[error("non-finite state during integration at t = {t}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SampleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Heun,
    Dopri5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    /// Number of schedule levels (grid has `n_steps + 2` nodes).
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub atol: f64,
    pub rtol: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            method: Method::Dopri5,
            n_steps: 200,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            atol: 1e-5,
            rtol: 1e-5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(SampleError::InvalidConfig(format!(
                "n_steps = {} (need at least 2)",
                self.n_steps
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(SampleError::InvalidConfig(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(SampleError::InvalidConfig(format!("rho = {} must be positive", self.rho)));
        }
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(SampleError::InvalidConfig(format!(
                "tolerances must be positive, got atol {}, rtol {}",
                self.atol, self.rtol
            )));
        }
        Ok(())
    }
}

/// Monotone decreasing noise levels; the endpoints are assigned exactly so
/// no power round trip perturbs them.
pub fn sigma_schedule(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Vec<f64> {
    assert!(n >= 2);
    let lo = sigma_min.powf(1.0 / rho);
    let hi = sigma_max.powf(1.0 / rho);
    let mut out = Vec::with_capacity(n);
    out.push(sigma_max);
    for i in 1..n - 1 {
        let f = i as f64 / (n - 1) as f64;
        out.push((hi + f * (lo - hi)).powf(rho));
    }
    out.push(sigma_min);
    out
}

/// Ascending flow-time grid `1/(1+sigma)` with exact 0 and 1 endpoints
/// appended, used both as integration checkpoints and step boundaries.
pub fn time_grid(sigmas: &[f64]) -> Vec<f64> {
    let mut t = Vec::with_capacity(sigmas.len() + 2);
    t.push(0.0);
    for &s in sigmas {
        t.push(1.0 / (1.0 + s));
    }
    t.push(1.0);
    t
}

/// Counters from one integration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeStats {
    /// Right-hand-side evaluations.
    pub nfe: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub min_dt: f64,
    pub max_dt: f64,
}

impl OdeStats {
    fn new() -> Self {
        OdeStats { nfe: 0, accepted: 0, rejected: 0, min_dt: f64::INFINITY, max_dt: 0.0 }
    }

    fn record_dt(&mut self, dt: f64) {
        self.min_dt = self.min_dt.min(dt);
        self.max_dt = self.max_dt.max(dt);
    }
}

type Rhs<'a> = dyn FnMut(f64, &[f64]) -> Result<Vec<f64>> + 'a;

/// Integrates `y' = f(t, y)` across the ascending `grid`, landing on every
/// node. Fixed-step methods take one (Euler) or one trapezoidal (Heun) step
/// per interval; the adaptive method subdivides intervals as its error
/// estimate demands.
pub fn integrate(
    f: &mut Rhs,
    y0: Vec<f64>,
    grid: &[f64],
    cfg: &SamplerConfig,
) -> Result<(Vec<f64>, OdeStats)> {
    cfg.validate()?;
    assert!(grid.len() >= 2, "grid needs at least two nodes");
    assert!(grid.windows(2).all(|w| w[1] > w[0]), "grid must be strictly increasing");
    match cfg.method {
        Method::Euler => fixed_step(f, y0, grid, false),
        Method::Heun => fixed_step(f, y0, grid, true),
        Method::Dopri5 => dopri5(f, y0, grid, cfg.atol, cfg.rtol),
    }
}

fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SampleError::NonFinite { t })
    }
}

fn fixed_step(f: &mut Rhs, mut y: Vec<f64>, grid: &[f64], heun: bool) -> Result<(Vec<f64>, OdeStats)> {
    let mut stats = OdeStats::new();
    for w in grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let dt = t1 - t0;
        let k1 = f(t0, &y)?;
        stats.nfe += 1;
        if heun {
            let pred: Vec<f64> = y.iter().zip(&k1).map(|(&yv, &k)| yv + dt * k).collect();
            let k2 = f(t1, &pred)?;
            stats.nfe += 1;
            for ((yv, &a), &b) in y.iter_mut().zip(&k1).zip(&k2) {
                *yv += dt * 0.5 * (a + b);
            }
        } else {
            for (yv, &k) in y.iter_mut().zip(&k1) {
                *yv += dt * k;
            }
        }
        check_finite(&y, t1)?;
        stats.accepted += 1;
        stats.record_dt(dt);
    }
    Ok((y, stats))
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order solution weights (the last tableau row).
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Difference between the fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
/// PI controller exponents on the current and previous error.
const ALPHA: f64 = 0.7 / 5.0;
const BETA: f64 = 0.4 / 5.0;
const FACTOR_MIN: f64 = 0.2;
const FACTOR_MAX: f64 = 5.0;
const DT_FLOOR: f64 = 1e-14;

fn dopri5(
    f: &mut Rhs,
    mut y: Vec<f64>,
    grid: &[f64],
    atol: f64,
    rtol: f64,
) -> Result<(Vec<f64>, OdeStats)> {
    let n = y.len();
    let mut stats = OdeStats::new();
    let mut dt = grid[1] - grid[0];
    let mut err_prev: f64 = 1.0;
    let mut k1 = f(grid[0], &y)?;
    stats.nfe += 1;

    for w in grid.windows(2) {
        let (node0, node1) = (w[0], w[1]);
        let mut t = node0;
        while t < node1 {
            let stepping_to_node = t + dt >= node1;
            let h = if stepping_to_node { node1 - t } else { dt };
            if h < DT_FLOOR {
                return Err(SampleError::StepUnderflow { t });
            }

            let mut k = vec![Vec::new(); 7];
            k[0] = k1.clone();
            for stage in 1..7 {
                let mut ys = y.clone();
                for (prev, kp) in k.iter().enumerate().take(stage) {
                    let a = A[stage - 1][prev];
                    if a != 0.0 {
                        for (yv, &kv) in ys.iter_mut().zip(kp.iter()) {
                            *yv += h * a * kv;
                        }
                    }
                }
                k[stage] = f(t + C[stage] * h, &ys)?;
                stats.nfe += 1;
            }

            let mut y_new = y.clone();
            for (stage, kp) in k.iter().enumerate() {
                if B[stage] != 0.0 {
                    for (yv, &kv) in y_new.iter_mut().zip(kp.iter()) {
                        *yv += h * B[stage] * kv;
                    }
                }
            }

            // Mixed-tolerance RMS error norm.
            let mut acc = 0.0f64;
            for i in 0..n {
                let mut e = 0.0;
                for (stage, kp) in k.iter().enumerate() {
                    if E[stage] != 0.0 {
                        e += E[stage] * kp[i];
                    }
                }
                e *= h;
                let scale = atol + rtol * y[i].abs().max(y_new[i].abs());
                let r = e / scale;
                acc += r * r;
            }
            let err = (acc / n as f64).sqrt();

            if err.is_finite() && err <= 1.0 {
                check_finite(&y_new, t + h)?;
                y = y_new;
                t += h;
                // first-same-as-last: stage 7 is the derivative at the new point
                k1 = k.pop().unwrap();
                stats.accepted += 1;
                stats.record_dt(h);
                let e = err.max(1e-10);
                let factor =
                    (SAFETY * e.powf(-ALPHA) * err_prev.powf(BETA)).clamp(FACTOR_MIN, FACTOR_MAX);
                dt = h * factor;
                err_prev = e;
            } else {
                stats.rejected += 1;
                let e = if err.is_finite() { err.max(1e-10) } else { 1e10 };
                dt = h * (SAFETY * e.powf(-ALPHA)).clamp(FACTOR_MIN, 1.0);
            }
        }
    }
    Ok((y, stats))
}

/// Draws a latent from the keyed noise stream and integrates the model's
/// velocity field from t = 0 to 1. Returns the final volume as a tensor
/// shaped `[1, 1, d, h, w]` plus integration counters.
///
/// `cond` channels, when present, are concatenated after the latent and
/// before the two time channels — matching the training layout.
pub fn sample<T: Scalar>(
    model: &UNet<T>,
    cond: Option<&Tensor<T>>,
    dims: (usize, usize, usize),
    cfg: &SamplerConfig,
    seed: u64,
    keys: &[u64],
) -> Result<(Tensor<T>, OdeStats)> {
    cfg.validate()?;
    let (d, h, w) = dims;
    if let Some(c) = cond {
        let s = c.shape();
        if s.len() != 5 || s[0] != 1 || s[2] != d || s[3] != h || s[4] != w {
            return Err(SampleError::InvalidConfig(format!(
                "conditioning shape {s:?} does not match volume {d}x{h}x{w}"
            )));
        }
    }
    let mut noise_rng = rng::stream_keyed(seed, "sample/noise", keys);
    let eta = standard_normal::<T, _>(&mut noise_rng, vec![1, 1, d, h, w]);
    let y0: Vec<f64> = eta.data().iter().map(|&v| v.to_f64()).collect();

    let grid = time_grid(&sigma_schedule(cfg.n_steps, cfg.sigma_min, cfg.sigma_max, cfg.rho));
    let mut rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let x = Tensor::from_vec(
            vec![1, 1, d, h, w],
            y.iter().map(|&v| T::from_f64(v)).collect(),
        );
        let tape = Tape::new();
        let mut input = x;
        if let Some(c) = cond {
            input = tape.concat_channels(&input, c)?;
        }
        input = tape.concat_channels(&input, &time_channels(t, d, h, w))?;
        let out = model.forward(&tape, &input)?;
        Ok(out.data().iter().map(|&v| v.to_f64()).collect())
    };
    let (y, stats) = integrate(&mut rhs, y0, &grid, cfg)?;
    let out = Tensor::from_vec(vec![1, 1, d, h, w], y.iter().map(|&v| T::from_f64(v)).collect());
    Ok((out, stats))
}
