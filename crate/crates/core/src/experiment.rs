//! End-to-end experiment orchestration: prepare a synthetic cohort at two
//! resolutions, train the three cascade stages from scratch, run the full
//! pipeline over held-out subjects, and evaluate the paired report.
//!
//! The same building blocks serve the command-line tools (which work one
//! artifact at a time) and the in-process experiment runner.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{
    conditioning_stage1, conditioning_stage2, conditioning_stage3_patch,
    upsample_trilinear, volume_to_tensor, CascadeError, DemoStats, PipelineConfig,
    PipelineOutput, StageModels, STAGE12_IN_CHANNELS, STAGE3_IN_CHANNELS,
};
use crate::flow::{train_stage, LogRow, TrainConfig, TrainError, TrainExample};
use crate::geometry::{
    compute_sdf, iou, make_partial, normalize_hu, GeometryError, OccupancyMask,
    PayloadKind, SdfGrid, Volume3,
};
use crate::metrics::{
    body_occupancy, evaluate_cohort, write_report_csv, MetricsError, MetricsReport,
    SubjectPair,
};
use crate::nn::{
    save_checkpoint, EmaState, NnError, OptimizerConfig, OptimizerState, UNet,
    UNetConfig,
};
use crate::phantom::{
    downsample, generate_cohort, CohortSampler, Demographics, GridSpec,
    ManifestRow, PhantomError, PhantomRecord,
};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Scale and hyperparameters of one full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Coarse working grid; the high grid is `coarse × pipeline.factor`.
    pub coarse: GridSpec,
    pub pipeline: PipelineConfig,
    pub base_channels: usize,
    pub levels: usize,
    /// Optimizer steps for stages 1..3.
    pub steps: [u64; 3],
    pub batch: usize,
    pub optim: OptimizerConfig,
    /// Decay of the sampling-weight average. Size it to the run: the
    /// initialization residue after `n` steps is `ema_beta^n`, so short runs
    /// need a smaller beta for the average to catch up with training.
    pub ema_beta: f64,
    pub cohort: CohortSampler,
}

impl Default for ExperimentConfig {
    /// Reference scale: a 200/32 train/test cohort at 16×16×24 (8 mm) /
    /// 32×32×48 (4 mm) with 20k steps per stage — sized for a multi-hour
    /// run on a multi-core desktop.
    fn default() -> Self {
        let optim = OptimizerConfig { lr0: 3e-4, total_steps: 20_000, ..OptimizerConfig::default() };
        ExperimentConfig {
            master_seed: 17,
            n_train: 200,
            n_test: 32,
            coarse: crate::phantom::default_coarse_grid(),
            pipeline: PipelineConfig::default(),
            base_channels: 8,
            levels: 2,
            steps: [20_000; 3],
            batch: 4,
            optim,
            ema_beta: 0.999,
            cohort: CohortSampler::default(),
        }
    }
}

impl ExperimentConfig {
    /// High-resolution grid implied by the coarse grid and the factor.
    pub fn high_grid(&self) -> GridSpec {
        GridSpec {
            nx: self.coarse.nx * self.pipeline.factor,
            ny: self.coarse.ny * self.pipeline.factor,
            nz: self.coarse.nz * self.pipeline.factor,
            spacing_mm: self.coarse.spacing_mm / self.pipeline.factor as f32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        if self.n_train < 1 || self.n_test < 2 {
            return Err(ExperimentError::InvalidConfig(format!(
                "need n_train >= 1 and n_test >= 2, got {}/{}",
                self.n_train, self.n_test
            )));
        }
        if self.batch < 1 || self.steps.iter().any(|&s| s < 1) {
            return Err(ExperimentError::InvalidConfig(
                "steps and batch must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(ExperimentError::InvalidConfig(format!(
                "ema_beta must lie in [0, 1), got {}",
                self.ema_beta
            )));
        }
        let longest = *self.steps.iter().max().expect("three stages");
        if self.optim.total_steps < longest {
            return Err(ExperimentError::InvalidConfig(format!(
                "learning-rate horizon {} is shorter than the longest stage ({longest} steps); \
                 the tail would train at zero learning rate",
                self.optim.total_steps
            )));
        }
        let div = 1usize << self.levels;
        for (name, e) in [
            ("coarse nx", self.coarse.nx),
            ("coarse ny", self.coarse.ny),
            ("coarse nz", self.coarse.nz),
            ("patch x", self.pipeline.patch[0]),
            ("patch y", self.pipeline.patch[1]),
            ("patch z", self.pipeline.patch[2]),
        ] {
            if e % div != 0 {
                return Err(ExperimentError::InvalidConfig(format!(
                    "{name} = {e} not divisible by the network's extent divisor {div}"
                )));
            }
        }
        let high = self.high_grid();
        for (a, n) in [(0, high.nx), (1, high.ny), (2, high.nz)] {
            if self.pipeline.patch[a] > n {
                return Err(ExperimentError::InvalidConfig(format!(
                    "patch extent {} exceeds high grid extent {n}",
                    self.pipeline.patch[a]
                )));
            }
        }
        self.pipeline
            .sampler
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        for stage in 1..=3u8 {
            stage_unet_config(self, stage)
                .validate()
                .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

/// One subject with every tensor the experiment needs, at both resolutions.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: String,
    pub seed: u64,
    pub demographics: Demographics,
    pub high_hu: Volume3,
    pub high_sdf_full: SdfGrid,
    pub high_sdf_partial: SdfGrid,
    pub coarse_hu: Volume3,
    pub coarse_sdf_full: SdfGrid,
    pub coarse_sdf_partial: SdfGrid,
}

/// Builds the two-resolution working set from loose high-grid artifacts
/// (as read back from disk): block-mean density, majority-vote occupancy,
/// and distances recomputed on the coarse grid (not downsampled, so they
/// remain genuine distances).
pub fn prepare_from_parts(
    id: &str,
    seed: u64,
    demographics: Demographics,
    high_hu: Volume3,
    high_sdf_full: SdfGrid,
    high_sdf_partial: SdfGrid,
    factor: usize,
) -> Result<PreparedSubject> {
    let coarse_hu = downsample(&high_hu, factor)?;
    let body_mean = downsample(&high_sdf_full.occupancy().vol, factor)?;
    let mut mask_vol = Volume3::zeros(
        body_mean.nx,
        body_mean.ny,
        body_mean.nz,
        body_mean.spacing,
        body_mean.origin,
        PayloadKind::Mask,
    );
    for (o, &m) in mask_vol.data.iter_mut().zip(&body_mean.data) {
        *o = if m >= 0.5 { 1.0 } else { 0.0 };
    }
    let coarse_body = OccupancyMask { vol: mask_vol };
    let tau = SdfGrid::default_tau(&coarse_body.vol);
    let coarse_sdf_full = compute_sdf(&coarse_body, tau)?;
    let coarse_sdf_partial = make_partial(&coarse_sdf_full, &coarse_body)?;
    Ok(PreparedSubject {
        id: id.to_string(),
        seed,
        demographics,
        high_hu,
        high_sdf_full,
        high_sdf_partial,
        coarse_hu,
        coarse_sdf_full,
        coarse_sdf_partial,
    })
}

/// [`prepare_from_parts`] for an in-memory generated record.
pub fn prepare_subject(rec: &PhantomRecord, factor: usize) -> Result<PreparedSubject> {
    prepare_from_parts(
        &rec.id,
        rec.seed,
        rec.demographics,
        rec.density.clone(),
        rec.sdf_full.clone(),
        rec.sdf_partial.clone(),
        factor,
    )
}

/// Generates and prepares the full cohort; the first `n_train` subjects
/// train, the rest are held out. Demographic normalization statistics come
/// from the training split only.
pub fn prepare_cohort(
    cfg: &ExperimentConfig,
) -> Result<(Vec<PreparedSubject>, Vec<PreparedSubject>, DemoStats)> {
    cfg.validate()?;
    let records = generate_cohort(
        cfg.n_train + cfg.n_test,
        cfg.master_seed,
        &cfg.cohort,
        cfg.high_grid(),
    )?;
    let mut prepared = Vec::with_capacity(records.len());
    for rec in &records {
        prepared.push(prepare_subject(rec, cfg.pipeline.factor)?);
    }
    let test = prepared.split_off(cfg.n_train);
    let train_demo: Vec<Demographics> =
        prepared.iter().map(|s| s.demographics).collect();
    let stats = DemoStats::from_cohort(&train_demo);
    Ok((prepared, test, stats))
}

fn crop_tensor(v: &Volume3, origin: [usize; 3], patch: [usize; 3]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
    for k in 0..patch[2] {
        for j in 0..patch[1] {
            for i in 0..patch[0] {
                data.push(v.at(origin[0] + i, origin[1] + j, origin[2] + k));
            }
        }
    }
    Tensor::from_vec(vec![1, 1, patch[2], patch[1], patch[0]], data)
}

/// Training example for the surface-completion stage: target is the full
/// coarse SDF, conditioned on the partial SDF plus demographics.
pub fn stage1_example(sub: &PreparedSubject, stats: &DemoStats) -> TrainExample<f32> {
    let z = stats.z(&sub.demographics);
    TrainExample {
        x1: volume_to_tensor(&sub.coarse_sdf_full.normalized()),
        cond: Some(conditioning_stage1::<f32>(&sub.coarse_sdf_partial, z).expect("shape fixed")),
    }
}

/// Training example for the coarse-density stage: target is the normalized
/// coarse density, conditioned on the full coarse SDF plus demographics.
pub fn stage2_example(sub: &PreparedSubject, stats: &DemoStats) -> TrainExample<f32> {
    let z = stats.z(&sub.demographics);
    TrainExample {
        x1: volume_to_tensor(&normalize_hu(&sub.coarse_hu)),
        cond: Some(conditioning_stage2::<f32>(&sub.coarse_sdf_full, z).expect("shape fixed")),
    }
}

/// Training example for the super-resolution stage: target is a random
/// high-grid patch of the normalized density, conditioned on the matching
/// crop of the upsampled coarse density, demographics, and position.
pub fn stage3_example(
    sub: &PreparedSubject,
    stats: &DemoStats,
    factor: usize,
    patch: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> TrainExample<f32> {
    let z = stats.z(&sub.demographics);
    let up = upsample_trilinear(&normalize_hu(&sub.coarse_hu), factor);
    let origin = [
        rng.gen_range(0..=up.nx - patch[0]),
        rng.gen_range(0..=up.ny - patch[1]),
        rng.gen_range(0..=up.nz - patch[2]),
    ];
    let high_norm = normalize_hu(&sub.high_hu);
    TrainExample {
        x1: crop_tensor(&high_norm, origin, patch),
        cond: Some(
            conditioning_stage3_patch::<f32>(&up, origin, patch, z).expect("origin in range"),
        ),
    }
}

/// A freshly trained stage: the optimized weights plus the averaged
/// weights actually used for sampling.
pub struct TrainedStage {
    pub model: UNet<f32>,
    pub opt: OptimizerState,
    pub ema: EmaState,
    pub log: Vec<LogRow>,
}

impl TrainedStage {
    /// The sampling network: same architecture, averaged weights.
    pub fn ema_model(&self) -> UNet<f32> {
        UNet {
            config: self.model.config.clone(),
            params: self.ema.as_params(&self.model.params),
        }
    }
}

/// Seed for a stage's model initialization and training streams, derived
/// from the master seed so stages never share randomness.
pub fn stage_seed(master_seed: u64, stage: u8) -> u64 {
    rng::stream_keyed(master_seed, "experiment/stage", &[stage as u64]).gen()
}

/// Network architecture for a given stage under this experiment config.
pub fn stage_unet_config(cfg: &ExperimentConfig, stage: u8) -> UNetConfig {
    let in_channels = if stage == 3 { STAGE3_IN_CHANNELS } else { STAGE12_IN_CHANNELS };
    UNetConfig {
        in_channels,
        out_channels: 1,
        base_channels: cfg.base_channels,
        levels: cfg.levels,
    }
}

fn run_stage_training(
    cfg: &ExperimentConfig,
    stage: u8,
    train: &[PreparedSubject],
    stats: &DemoStats,
    out_dir: Option<&Path>,
    mut model: UNet<f32>,
    mut opt: OptimizerState,
    mut ema: EmaState,
    seed: u64,
) -> Result<TrainedStage> {
    let total = cfg.steps[stage as usize - 1];
    let remaining = total.saturating_sub(opt.step);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let checkpoint_path = out_dir.map(|d| d.join(format!("stage{stage}.ckpt")));
    // the decay horizon comes from the config, not the stage length, so a
    // run interrupted at step k and continued later follows the same
    // schedule as one uninterrupted run
    let tcfg = TrainConfig {
        steps: remaining,
        batch: cfg.batch,
        optim: cfg.optim.clone(),
        log_every: (total / 50).max(1),
        checkpoint_path: checkpoint_path.clone(),
        checkpoint_every: (total / 4).max(1),
    };

    let factor = cfg.pipeline.factor;
    let patch = cfg.pipeline.patch;
    let n_train = train.len();
    let log = train_stage(
        &mut model,
        &mut opt,
        &mut ema,
        &tcfg,
        seed,
        |_, _, r: &mut ChaCha8Rng| {
            let sub = &train[r.gen_range(0..n_train)];
            match stage {
                1 => stage1_example(sub, stats),
                2 => stage2_example(sub, stats),
                _ => stage3_example(sub, stats, factor, patch, r),
            }
        },
        None,
    )?;

    if let Some(dir) = out_dir {
        let mut csv = fs::File::create(dir.join(format!("stage{stage}_loss.csv")))?;
        crate::flow::write_log_csv(&mut csv, &log)?;
        save_checkpoint(
            checkpoint_path.as_deref().expect("set with out_dir"),
            &model,
            &opt,
            &ema,
            &tcfg.optim,
            seed,
        )?;
    }
    Ok(TrainedStage { model, opt, ema, log })
}

/// Trains one stage (1, 2, or 3) from scratch over the prepared training
/// split. Writes a checkpoint and a loss log under `out_dir` when given.
pub fn train_one_stage(
    cfg: &ExperimentConfig,
    stage: u8,
    train: &[PreparedSubject],
    stats: &DemoStats,
    out_dir: Option<&Path>,
) -> Result<TrainedStage> {
    assert!((1..=3).contains(&stage), "stage must be 1, 2, or 3");
    assert!(!train.is_empty());
    let seed = stage_seed(cfg.master_seed, stage);
    let model: UNet<f32> = UNet::new(stage_unet_config(cfg, stage), seed)?;
    let opt = OptimizerState::new(&model.params);
    let ema = EmaState::new(&model.params, cfg.ema_beta);
    run_stage_training(cfg, stage, train, stats, out_dir, model, opt, ema, seed)
}

/// Continues training a stage from a saved checkpoint up to the step count
/// in `cfg`. Because example and noise draws are keyed by step number, the
/// continued run reproduces exactly what an uninterrupted run would have
/// done from the same point.
pub fn continue_stage(
    cfg: &ExperimentConfig,
    stage: u8,
    train: &[PreparedSubject],
    stats: &DemoStats,
    out_dir: Option<&Path>,
    ckpt: crate::nn::Checkpoint<f32>,
) -> Result<TrainedStage> {
    assert!((1..=3).contains(&stage), "stage must be 1, 2, or 3");
    let expected = stage_unet_config(cfg, stage);
    if ckpt.model.config != expected {
        return Err(ExperimentError::InvalidConfig(format!(
            "checkpoint architecture {:?} does not match the configured stage {stage} \
             architecture {:?}",
            ckpt.model.config, expected
        )));
    }
    let seed = stage_seed(cfg.master_seed, stage);
    if ckpt.header.seed != seed {
        return Err(ExperimentError::InvalidConfig(format!(
            "checkpoint was trained under seed {}, config implies {seed}",
            ckpt.header.seed
        )));
    }
    if ckpt.header.ema_beta != cfg.ema_beta {
        return Err(ExperimentError::InvalidConfig(format!(
            "checkpoint averages weights with beta {}, config says {}",
            ckpt.header.ema_beta, cfg.ema_beta
        )));
    }
    run_stage_training(cfg, stage, train, stats, out_dir, ckpt.model, ckpt.opt, ckpt.ema, seed)
}

/// Per-subject pipeline products kept for gate evaluation.
pub struct TestRun {
    pub pair: SubjectPair,
    pub coarse_hu: Volume3,
    pub wall_s: [f64; 3],
    pub nfe: [u64; 3],
}

/// Runs the cascaded pipeline over the held-out subjects using the
/// stages' averaged weights.
pub fn run_test_cohort(
    cfg: &ExperimentConfig,
    stages: [&UNet<f32>; 3],
    test: &[PreparedSubject],
    stats: &DemoStats,
) -> Result<Vec<TestRun>> {
    let models = StageModels { stage1: stages[0], stage2: stages[1], stage3: stages[2] };
    let mut runs = Vec::with_capacity(test.len());
    for (idx, sub) in test.iter().enumerate() {
        // noise streams are keyed by the subject's absolute cohort index, so
        // sampling a held-out subject individually reproduces these volumes
        let out: PipelineOutput = crate::cascade::run_pipeline(
            &models,
            &sub.coarse_sdf_partial,
            stats.z(&sub.demographics),
            &cfg.pipeline,
            cfg.master_seed,
            (cfg.n_train + idx) as u64,
        )?;
        let pair = SubjectPair {
            id: sub.id.clone(),
            sex: sub.demographics.sex,
            orig_hu: sub.high_hu.clone(),
            gen_hu: out.high_hu,
            sdf_gt: sub.coarse_sdf_full.clone(),
            sdf_partial: sub.coarse_sdf_partial.clone(),
            sdf_restored: out.f_full,
        };
        runs.push(TestRun {
            pair,
            coarse_hu: out.coarse_hu,
            wall_s: out.stage_wall_s,
            nfe: [out.stats[0].nfe, out.stats[1].nfe, out.stats[2].nfe],
        });
    }
    Ok(runs)
}

/// Mean intersection-over-union between generated and ground-truth body
/// occupancy on the coarse grid, thresholded identically on both sides.
pub fn stage2_body_iou(runs: &[TestRun], test: &[PreparedSubject]) -> Result<f64> {
    assert_eq!(runs.len(), test.len());
    let mut acc = 0.0;
    for (run, sub) in runs.iter().zip(test) {
        acc += iou(&body_occupancy(&run.coarse_hu), &body_occupancy(&sub.coarse_hu))
            .map_err(MetricsError::from)?;
    }
    Ok(acc / runs.len() as f64)
}

/// Final products of one experiment: evaluation report plus phase timings
/// and the summary numbers the run gates read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub stage2_body_iou_mean: f64,
    pub final_losses: [f64; 3],
    pub phase_wall_s: PhaseWall,
    pub nfe_totals: [u64; 3],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseWall {
    pub prepare: f64,
    pub train: [f64; 3],
    pub sample: f64,
    pub evaluate: f64,
}

pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub summary: ExperimentSummary,
}

/// Runs the whole experiment. When `out_dir` is given, writes cohort
/// manifest, per-stage checkpoints and loss curves, the report (CSV and
/// JSON), and a machine-readable summary.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut wall = PhaseWall::default();

    let t = Instant::now();
    let (train, test, stats) = prepare_cohort(cfg)?;
    wall.prepare = t.elapsed().as_secs_f64();

    if let Some(dir) = out_dir {
        let rows: Vec<ManifestRow> = train
            .iter()
            .chain(&test)
            .map(|s| ManifestRow {
                id: s.id.clone(),
                seed: s.seed,
                age: s.demographics.age,
                sex: s.demographics.sex,
                height_cm: s.demographics.height_cm,
                weight_kg: s.demographics.weight_kg,
                files: Default::default(),
            })
            .collect();
        let mut f = fs::File::create(dir.join("cohort.jsonl"))?;
        crate::phantom::write_manifest(&mut f, &rows)?;
    }

    let mut trained = Vec::with_capacity(3);
    let mut final_losses = [0.0f64; 3];
    for stage in 1..=3u8 {
        let t = Instant::now();
        let ts = train_one_stage(cfg, stage, &train, &stats, out_dir)?;
        wall.train[stage as usize - 1] = t.elapsed().as_secs_f64();
        final_losses[stage as usize - 1] =
            ts.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
        trained.push(ts);
    }
    let ema_models: Vec<UNet<f32>> = trained.iter().map(|t| t.ema_model()).collect();

    let t = Instant::now();
    let runs = run_test_cohort(
        cfg,
        [&ema_models[0], &ema_models[1], &ema_models[2]],
        &test,
        &stats,
    )?;
    wall.sample = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let body_iou = stage2_body_iou(&runs, &test)?;
    let pairs: Vec<SubjectPair> = runs.iter().map(|r| r.pair.clone()).collect();
    let report = evaluate_cohort(&format!("seed{}", cfg.master_seed), &pairs, &[])?;
    wall.evaluate = t.elapsed().as_secs_f64();

    let mut nfe_totals = [0u64; 3];
    for r in &runs {
        for s in 0..3 {
            nfe_totals[s] += r.nfe[s];
        }
    }
    let summary = ExperimentSummary {
        config: cfg.clone(),
        stage2_body_iou_mean: body_iou,
        final_losses,
        phase_wall_s: wall,
        nfe_totals,
    };

    if let Some(dir) = out_dir {
        fs::write(dir.join("report.csv"), write_report_csv(&report))?;
        fs::write(dir.join("report.json"), report.to_json())?;
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
    }
    Ok(ExperimentOutcome { report, summary })
}

/// Resolve an output path that may not exist yet.
pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path)?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{Method, SamplerConfig};

    /// Smallest structurally valid experiment; seconds of wall time.
    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            master_seed: 5,
            n_train: 3,
            n_test: 2,
            coarse: GridSpec { nx: 8, ny: 8, nz: 8, spacing_mm: 12.0 },
            pipeline: PipelineConfig {
                sampler: SamplerConfig {
                    method: Method::Euler,
                    n_steps: 2,
                    ..SamplerConfig::default()
                },
                factor: 2,
                patch: [8, 8, 8],
                stride: [4, 4, 4],
            },
            base_channels: 4,
            levels: 2,
            steps: [2, 2, 2],
            batch: 1,
            optim: OptimizerConfig { total_steps: 2, ..OptimizerConfig::default() },
            ema_beta: 0.5,
            cohort: CohortSampler::default(),
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = smoke_config();
        assert!(cfg.validate().is_ok());
        cfg.coarse.nz = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = smoke_config();
        cfg.pipeline.patch = [8, 8, 40];
        assert!(cfg.validate().is_err());
        let mut cfg = smoke_config();
        cfg.n_test = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn prepared_subject_has_consistent_grids() {
        let cfg = smoke_config();
        let (train, test, _) = prepare_cohort(&cfg).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 2);
        let s = &train[0];
        assert_eq!((s.coarse_hu.nx, s.coarse_hu.ny, s.coarse_hu.nz), (8, 8, 8));
        assert_eq!((s.high_hu.nx, s.high_hu.ny, s.high_hu.nz), (16, 16, 16));
        assert_eq!(s.coarse_hu.spacing, 2.0 * s.high_hu.spacing);
        // coarse and high share physical extents, hence truncation radii
        assert_eq!(s.coarse_sdf_full.tau, s.high_sdf_full.tau);
        // the partial surface is strictly poorer than the full one
        let full = s.coarse_sdf_full.occupancy().count();
        let part = s.coarse_sdf_partial.occupancy().count();
        assert!(part < full, "partial {part} must lose voxels vs full {full}");
    }

    #[test]
    fn stage_examples_have_contract_shapes() {
        let cfg = smoke_config();
        let (train, _, stats) = prepare_cohort(&cfg).unwrap();
        let e1 = stage1_example(&train[0], &stats);
        assert_eq!(e1.x1.shape(), &[1, 1, 8, 8, 8]);
        assert_eq!(e1.cond.as_ref().unwrap().shape(), &[1, 5, 8, 8, 8]);
        let e2 = stage2_example(&train[0], &stats);
        assert_eq!(e2.x1.shape(), &[1, 1, 8, 8, 8]);
        // stage-1/2 stacked input = 1 (x_t) + 5 (cond) + 2 (time)
        assert_eq!(1 + 5 + 2, STAGE12_IN_CHANNELS);
        let mut r = rng::stream_keyed(1, "unit", &[]);
        let e3 = stage3_example(&train[0], &stats, 2, [8, 8, 8], &mut r);
        assert_eq!(e3.x1.shape(), &[1, 1, 8, 8, 8]);
        assert_eq!(e3.cond.as_ref().unwrap().shape(), &[1, 17, 8, 8, 8]);
        assert_eq!(1 + 17 + 2, STAGE3_IN_CHANNELS);
        // x1 values are normalized densities in [0, 1]
        for &v in e3.x1.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn smoke_experiment_runs_and_writes_artifacts() {
        let cfg = smoke_config();
        let dir = std::env::temp_dir().join(format!("volflow-exp-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let outcome = run_experiment(&cfg, Some(&dir)).unwrap();
        assert_eq!(outcome.report.n_subjects, 2);
        assert!(!outcome.report.rows.is_empty());
        assert!(outcome.summary.stage2_body_iou_mean.is_finite());
        for name in [
            "cohort.jsonl",
            "stage1.ckpt",
            "stage2.ckpt",
            "stage3.ckpt",
            "stage1_loss.csv",
            "stage2_loss.csv",
            "stage3_loss.csv",
            "report.csv",
            "report.json",
            "summary.json",
        ] {
            assert!(dir.join(name).exists(), "missing artifact {name}");
        }
        // manifest row count covers the whole cohort
        let manifest = fs::read_to_string(dir.join("cohort.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), 5);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn continued_training_matches_uninterrupted_run() {
        let mut short = smoke_config();
        short.steps = [2, 2, 2];
        short.optim.total_steps = 4;
        let mut full_cfg = short.clone();
        full_cfg.steps = [4, 2, 2];

        let (train, _, stats) = prepare_cohort(&short).unwrap();
        let dir =
            std::env::temp_dir().join(format!("volflow-resume-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);

        // uninterrupted 4-step run
        let full = train_one_stage(&full_cfg, 1, &train, &stats, None).unwrap();
        // same run stopped after 2 steps, then continued from its checkpoint
        train_one_stage(&short, 1, &train, &stats, Some(&dir)).unwrap();
        let ckpt =
            crate::nn::load_checkpoint::<f32>(&dir.join("stage1.ckpt")).unwrap();
        assert_eq!(ckpt.header.step, 2);
        let resumed = continue_stage(&full_cfg, 1, &train, &stats, None, ckpt).unwrap();

        assert_eq!(full.opt.step, 4);
        assert_eq!(resumed.opt.step, 4);
        for i in 0..full.model.params.len() {
            let a = full.model.params.tensor_at(i).data();
            let b = resumed.model.params.tensor_at(i).data();
            assert!(
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {i} diverged after resume"
            );
        }
        assert_eq!(
            full.log.last().unwrap().loss,
            resumed.log.last().unwrap().loss
        );

        // a checkpoint trained under a different architecture is rejected
        let ckpt = crate::nn::load_checkpoint::<f32>(&dir.join("stage1.ckpt")).unwrap();
        let mut other = full_cfg.clone();
        other.base_channels = 8;
        match continue_stage(&other, 1, &train, &stats, None, ckpt) {
            Err(ExperimentError::InvalidConfig(msg)) => {
                assert!(msg.contains("architecture"), "{msg}");
            }
            other => panic!("expected config rejection, got {:?}", other.err()),
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn experiment_is_deterministic() {
        let cfg = smoke_config();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(write_report_csv(&a.report), write_report_csv(&b.report));
        assert_eq!(
            a.summary.stage2_body_iou_mean.to_bits(),
            b.summary.stage2_body_iou_mean.to_bits()
        );
        assert_eq!(a.summary.final_losses, b.summary.final_losses);
    }
}
