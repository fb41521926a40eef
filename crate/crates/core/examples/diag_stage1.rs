//! Scratch diagnostic: trains the surface-completion stage alone on the
//! acceptance-scale coarse grid and reports restored-surface quality at a
//! ladder of step counts, sampling with both the live and the averaged
//! weights. Separates "the averaged weights lag the training" from "the
//! model is undertrained".

use volflow_core::cascade::run_stage1;
use volflow_core::experiment::{
    continue_stage, prepare_cohort, train_one_stage, ExperimentConfig, TrainedStage,
};
use volflow_core::geometry::{chamfer, extract_surface_points, iou};
use volflow_core::nn::load_checkpoint;
use volflow_core::sampler::{Method, SamplerConfig};
use volflow_core::UNet;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.n_train = 32;
    cfg.n_test = 8;
    cfg.steps = [2000, 1, 1]; // only stage 1 is exercised
    cfg.batch = 4;
    cfg.ema_beta = 0.99;
    cfg.optim.total_steps = 2000;
    cfg.pipeline.sampler = SamplerConfig {
        method: Method::Euler,
        n_steps: 32,
        ..SamplerConfig::default()
    };
    eprintln!("diag config: {cfg:?}");

    let (train, test, stats) = prepare_cohort(&cfg).expect("cohort");
    let dir = std::env::temp_dir().join("volflow-diag-stage1");
    let _ = std::fs::remove_dir_all(&dir);

    // Train in rungs; each continuation resumes the same run.
    let rungs = [500u64, 1000, 2000];
    let mut done = 0u64;
    for &target in &rungs {
        let mut partial = cfg.clone();
        partial.steps = [target, 1, 1];
        let t0 = std::time::Instant::now();
        let trained: TrainedStage = if done == 0 {
            train_one_stage(&partial, 1, &train, &stats, Some(&dir)).expect("train")
        } else {
            let ckpt = load_checkpoint::<f32>(&dir.join("stage1.ckpt")).expect("ckpt");
            continue_stage(&partial, 1, &train, &stats, Some(&dir), ckpt).expect("continue")
        };
        done = target;
        let loss = trained.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
        println!(
            "== {target} steps (+{:.0} s): final loss {loss:.4}",
            t0.elapsed().as_secs_f64()
        );
        evaluate("live", &trained.model, &cfg, &test, &stats);
        evaluate("ema ", &trained.ema_model(), &cfg, &test, &stats);
    }
}

fn evaluate(
    tag: &str,
    model: &UNet<f32>,
    cfg: &ExperimentConfig,
    test: &[volflow_core::experiment::PreparedSubject],
    stats: &volflow_core::cascade::DemoStats,
) {
    let mut iou_partial = 0.0;
    let mut iou_restored = 0.0;
    let mut cd_partial = 0.0;
    let mut cd_restored = 0.0;
    for (i, sub) in test.iter().enumerate() {
        let z = stats.z(&sub.demographics);
        let (restored, _) = run_stage1(
            model,
            &sub.coarse_sdf_partial,
            z,
            &cfg.pipeline.sampler,
            cfg.master_seed,
            (cfg.n_train + i) as u64,
        )
        .expect("stage1");
        let gt_occ = sub.coarse_sdf_full.occupancy();
        iou_partial += iou(&sub.coarse_sdf_partial.occupancy(), &gt_occ).unwrap();
        iou_restored += iou(&restored.occupancy(), &gt_occ).unwrap();
        let gt_pts = extract_surface_points(&sub.coarse_sdf_full).unwrap();
        let partial_pts = extract_surface_points(&sub.coarse_sdf_partial).unwrap();
        let restored_pts = extract_surface_points(&restored).unwrap();
        cd_partial += chamfer(&partial_pts, &gt_pts).unwrap();
        cd_restored += chamfer(&restored_pts, &gt_pts).unwrap();
    }
    let n = test.len() as f64;
    println!(
        "   {tag}: IoU partial {:.4} restored {:.4} | chamfer partial {:.2} restored {:.2} (ratio {:.3})",
        iou_partial / n,
        iou_restored / n,
        cd_partial / n,
        cd_restored / n,
        (cd_restored / n) / (cd_partial / n)
    );
}
