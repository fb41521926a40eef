//! Scratch timing probe used to calibrate the end-to-end experiment scale.

use std::time::Instant;

use volflow_core::flow::{
    standard_normal, time_channels, train_stage, TrainConfig, TrainExample,
};
use volflow_core::nn::{EmaState, OptimizerState, UNet, UNetConfig};
use volflow_core::tensor::{Tape, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probe(base: usize, levels: usize, in_ch: usize, d: usize, h: usize, w: usize, batch: usize) {
    let cfg = UNetConfig {
        in_channels: in_ch,
        out_channels: 1,
        base_channels: base,
        levels,
    };
    let mut model: UNet<f32> = UNet::new(cfg, 1).unwrap();
    let n_params = model.params.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // forward-only (sampling cost per NFE)
    let x: Tensor<f32> = standard_normal(&mut rng, vec![1, in_ch - 2, d, h, w]);
    let tch: Tensor<f32> = time_channels(0.5, d, h, w);
    let warm = Instant::now();
    let mut n_fwd = 0u32;
    while warm.elapsed().as_secs_f64() < 2.0 {
        let tape = Tape::new();
        let stacked = tape.concat_channels(&x, &tch).unwrap();
        let _ = model.forward(&tape, &stacked).unwrap();
        n_fwd += 1;
    }
    let fwd_ms = warm.elapsed().as_secs_f64() * 1000.0 / n_fwd as f64;

    // full training steps through the real loop
    let cond_ch = in_ch - 3; // one x_t channel, two time channels
    let steps = 12u64;
    let tcfg = TrainConfig {
        steps,
        batch,
        log_every: steps,
        ..TrainConfig::default()
    };
    let mut opt = OptimizerState::new(&model.params);
    let mut ema = EmaState::new(&model.params, 0.999);
    let t0 = Instant::now();
    train_stage(
        &mut model,
        &mut opt,
        &mut ema,
        &tcfg,
        7,
        |_, _, r| {
            let x1 = standard_normal(r, vec![1, 1, d, h, w]);
            let cond = standard_normal(r, vec![1, cond_ch, d, h, w]);
            TrainExample { x1, cond: Some(cond) }
        },
        None,
    )
    .unwrap();
    let step_ms = t0.elapsed().as_secs_f64() * 1000.0 / steps as f64;

    println!(
        "base={base} levels={levels} in={in_ch} {d}x{h}x{w} batch={batch}: params={n_params} fwd={fwd_ms:.1} ms, train step={step_ms:.1} ms"
    );
}

fn main() {
    // stage-1/2 shapes (coarse grid 16x16x24, 8 input channels)
    probe(8, 2, 8, 16, 16, 24, 4);
    probe(16, 2, 8, 16, 16, 24, 4);
    // stage-3 shape (patch 16x16x24, 20 input channels)
    probe(8, 2, 20, 16, 16, 24, 4);
    probe(16, 2, 20, 16, 16, 24, 4);
}
