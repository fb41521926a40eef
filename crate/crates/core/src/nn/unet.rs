//! 3D U-Net velocity model.
//!
//! Encoder levels apply two conv blocks (3x3x3 conv, group norm, SiLU) and
//! then a stride-2 conv that doubles the channel count. The bottleneck is
//! two more blocks. Each decoder level nearest-upsamples, convolves back to
//! the level width, concatenates the skip tensor, and applies two blocks.
//! The head is a 1x1x1 conv initialized to zero, so a fresh network is the
//! zero velocity field.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{NnError, ParamSet, Result};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor};

const GN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels of the stacked conditioning input.
    pub in_channels: usize,
    /// Channels of the predicted field (1 for scalar volumes).
    pub out_channels: usize,
    /// Width of the first level; level `l` has `base_channels << l`.
    pub base_channels: usize,
    /// Number of stride-2 downsampling steps.
    pub levels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { in_channels: 8, out_channels: 1, base_channels: 32, levels: 2 }
    }
}

impl UNetConfig {
    /// Channel width at level `l` (level `levels` is the bottleneck).
    pub fn width(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Input extents must be divisible by this for the skip shapes to line up.
    pub fn extent_divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(NnError::InvalidConfig("channel counts must be positive".into()));
        }
        if self.levels == 0 || self.levels > 4 {
            return Err(NnError::InvalidConfig(format!(
                "levels must be in 1..=4, got {}",
                self.levels
            )));
        }
        if self.base_channels < 4 {
            return Err(NnError::InvalidConfig(format!(
                "base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        for l in 0..=self.levels {
            let c = self.width(l);
            if c % norm_groups(c) != 0 {
                return Err(NnError::InvalidConfig(format!(
                    "level width {c} not divisible by its group-norm group count"
                )));
            }
        }
        Ok(())
    }
}

fn norm_groups(channels: usize) -> usize {
    channels.min(8)
}

/// The model: a config plus its named parameters.
pub struct UNet<T: Scalar> {
    pub config: UNetConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> UNet<T> {
    /// Builds a freshly initialized network. Conv kernels are He-normal
    /// draws from a stream keyed by `(seed, parameter name)`, so the layout
    /// of other parameters cannot perturb any one buffer.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let c_in = config.in_channels;
        for l in 0..config.levels {
            let c = config.width(l);
            let prev = if l == 0 { c_in } else { config.width(l - 1) };
            // the encoder entry at level 0 sees the raw input; deeper levels
            // see the previous down conv output which already has width c
            let first_in = if l == 0 { prev } else { c };
            init_block(&mut params, &format!("enc{l}.a"), first_in, c, seed);
            init_block(&mut params, &format!("enc{l}.b"), c, c, seed);
            init_conv(&mut params, &format!("down{l}"), c, config.width(l + 1), 3, seed);
        }
        let cb = config.width(config.levels);
        init_block(&mut params, "mid.a", cb, cb, seed);
        init_block(&mut params, "mid.b", cb, cb, seed);
        for l in (0..config.levels).rev() {
            let c = config.width(l);
            init_conv(&mut params, &format!("up{l}"), config.width(l + 1), c, 3, seed);
            init_block(&mut params, &format!("dec{l}.a"), 2 * c, c, seed);
            init_block(&mut params, &format!("dec{l}.b"), c, c, seed);
        }
        // zero-initialized head: the untrained model predicts zero velocity
        params.insert(
            "head.weight",
            Tensor::zeros(vec![config.out_channels, config.width(0), 1, 1, 1]),
        );
        params.insert("head.bias", Tensor::zeros(vec![config.out_channels]));
        Ok(UNet { config, params })
    }

    /// Runs the network, recording onto `tape`. Output shape is
    /// `[N, out_channels, D, H, W]` with the input spatial extents.
    pub fn forward(&self, tape: &Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(NnError::InvalidConfig(format!(
                "expected input [N, {}, D, H, W], got {:?}",
                self.config.in_channels, s
            )));
        }
        let div = self.config.extent_divisor();
        if s[2..].iter().any(|&e| e % div != 0 || e == 0) {
            return Err(NnError::ExtentNotDivisible { extents: s[2..].to_vec(), divisor: div });
        }
        let p = &self.params;
        let mut h = input.clone();
        let mut skips = Vec::with_capacity(self.config.levels);
        for l in 0..self.config.levels {
            h = self.block(tape, &format!("enc{l}.a"), &h)?;
            h = self.block(tape, &format!("enc{l}.b"), &h)?;
            skips.push(h.clone());
            h = tape.conv3d(
                &h,
                p.get(&format!("down{l}.weight")),
                p.get(&format!("down{l}.bias")),
                2,
                1,
            )?;
        }
        h = self.block(tape, "mid.a", &h)?;
        h = self.block(tape, "mid.b", &h)?;
        for l in (0..self.config.levels).rev() {
            h = tape.upsample_nearest2(&h)?;
            h = tape.conv3d(
                &h,
                p.get(&format!("up{l}.weight")),
                p.get(&format!("up{l}.bias")),
                1,
                1,
            )?;
            h = tape.concat_channels(&h, &skips[l])?;
            h = self.block(tape, &format!("dec{l}.a"), &h)?;
            h = self.block(tape, &format!("dec{l}.b"), &h)?;
        }
        Ok(tape.conv3d(&h, p.get("head.weight"), p.get("head.bias"), 1, 0)?)
    }

    fn block(&self, tape: &Tape<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = &self.params;
        let conv = tape.conv3d(
            x,
            p.get(&format!("{name}.weight")),
            p.get(&format!("{name}.bias")),
            1,
            1,
        )?;
        let c = conv.shape()[1];
        let normed = tape.group_norm(
            &conv,
            norm_groups(c),
            p.get(&format!("{name}.gain")),
            p.get(&format!("{name}.shift")),
            T::from_f64(GN_EPS),
        )?;
        Ok(tape.silu(&normed))
    }
}

/// Conv + group-norm parameters for one block.
fn init_block<T: Scalar>(params: &mut ParamSet<T>, name: &str, c_in: usize, c_out: usize, seed: u64) {
    init_conv(params, name, c_in, c_out, 3, seed);
    params.insert(&format!("{name}.gain"), Tensor::ones(vec![c_out]));
    params.insert(&format!("{name}.shift"), Tensor::zeros(vec![c_out]));
}

fn init_conv<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    seed: u64,
) {
    let fan_in = c_in * k * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let mut r = rng::stream(seed, &format!("unet/init/{name}.weight"));
    let data: Vec<T> = (0..c_out * fan_in)
        .map(|_| T::from_f64(normal.sample(&mut r)))
        .collect();
    params.insert(&format!("{name}.weight"), Tensor::from_vec(vec![c_out, c_in, k, k, k], data));
    params.insert(&format!("{name}.bias"), Tensor::zeros(vec![c_out]));
}
