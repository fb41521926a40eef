//! Subcommand implementations.
//!
//! Errors are split into two classes that drive the process exit code:
//! [`CliError::Usage`] (exit 2) for anything the user can fix by changing
//! flags, the config file, or mismatched inputs, and [`CliError::Runtime`]
//! (exit 1) for failures of the work itself.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use volflow_core::cascade::{DemoStats, StageModels};
use volflow_core::experiment::{
    continue_stage, prepare_from_parts, run_experiment, stage_unet_config, train_one_stage,
    ExperimentError, PreparedSubject,
};
use volflow_core::geometry::PayloadKind;
use volflow_core::metrics::{evaluate_cohort, write_report_csv};
use volflow_core::nn::load_checkpoint;
use volflow_core::phantom::{generate_cohort, read_manifest, write_manifest, ManifestRow};
use volflow_core::{Demographics, ExperimentConfig, SdfGrid, SubjectPair, UNet, Volume3};

#[derive(Debug)]
pub enum CliError {
    /// The user asked for something inconsistent; fix the invocation.
    Usage(String),
    /// The work itself failed.
    Runtime(String),
}

impl CliError {
    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Reads the experiment configuration, or the defaults when no file is
/// given, and validates it.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", p.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_cmd(print_defaults: bool, check: Option<&Path>) -> Result<()> {
    if !print_defaults && check.is_none() {
        return Err(CliError::Usage(
            "nothing to do: pass --print-defaults and/or --check <FILE>".into(),
        ));
    }
    if print_defaults {
        let text = toml::to_string_pretty(&ExperimentConfig::default())
            .expect("default config serializes");
        print!("{text}");
    }
    if let Some(p) = check {
        load_config(Some(p))?;
        println!("{}: ok", p.display());
    }
    Ok(())
}

pub fn gen_cohort(
    cfg: &ExperimentConfig,
    n: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let n = n.unwrap_or(cfg.n_train + cfg.n_test);
    if n < 1 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let seed = seed.unwrap_or(cfg.master_seed);
    let records = generate_cohort(n, seed, &cfg.cohort, cfg.high_grid())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(records.len());
    for rec in &records {
        let dir = out.join(&rec.id);
        fs::create_dir_all(&dir)?;
        let mut files = BTreeMap::new();
        for (name, vol) in [
            ("density", &rec.density),
            ("sdf_full", &rec.sdf_full.vol),
            ("sdf_partial", &rec.sdf_partial.vol),
        ] {
            let file = format!("{name}.vol3");
            vol.write(&dir.join(&file))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            files.insert(name.to_string(), format!("{}/{file}", rec.id));
        }
        rows.push(ManifestRow::from_record(rec, files));
    }
    let mut f = fs::File::create(out.join("manifest.jsonl"))?;
    write_manifest(&mut f, &rows)?;
    println!("wrote {} subjects and manifest.jsonl to {}", rows.len(), out.display());
    Ok(())
}

fn read_rows(cohort: &Path) -> Result<Vec<ManifestRow>> {
    let path = cohort.join("manifest.jsonl");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let rows = read_manifest(&text)
        .map_err(|e| CliError::Usage(format!("malformed manifest {}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(CliError::Usage(format!("manifest {} is empty", path.display())));
    }
    Ok(rows)
}

fn demographics_of(row: &ManifestRow) -> Demographics {
    Demographics {
        age: row.age,
        sex: row.sex,
        height_cm: row.height_cm,
        weight_kg: row.weight_kg,
    }
}

/// Normalization statistics always come from the training split, no matter
/// which subject a command touches.
fn training_stats(cfg: &ExperimentConfig, rows: &[ManifestRow]) -> Result<DemoStats> {
    if rows.len() < cfg.n_train {
        return Err(CliError::Usage(format!(
            "manifest holds {} subjects but the config expects n_train = {}",
            rows.len(),
            cfg.n_train
        )));
    }
    let demo: Vec<Demographics> = rows[..cfg.n_train].iter().map(demographics_of).collect();
    Ok(DemoStats::from_cohort(&demo))
}

fn read_volume(cohort: &Path, row: &ManifestRow, key: &str, kind: PayloadKind) -> Result<Volume3> {
    let rel = row.files.get(key).ok_or_else(|| {
        CliError::Usage(format!("manifest row {} lacks a {key:?} file entry", row.id))
    })?;
    let path = cohort.join(rel);
    let vol = Volume3::read(&path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if vol.kind != kind {
        return Err(CliError::Usage(format!(
            "{}: payload kind {:?} where {kind:?} was expected",
            path.display(),
            vol.kind
        )));
    }
    Ok(vol)
}

/// Loads one manifest subject and rebuilds its two-resolution working set,
/// checking the volumes against the configured grid.
fn load_subject(cohort: &Path, row: &ManifestRow, cfg: &ExperimentConfig) -> Result<PreparedSubject> {
    let density = read_volume(cohort, row, "density", PayloadKind::DensityHu)?;
    let g = cfg.high_grid();
    if density.nx != g.nx
        || density.ny != g.ny
        || density.nz != g.nz
        || density.spacing != g.spacing_mm
    {
        return Err(CliError::Usage(format!(
            "subject {}: volume grid {} does not match the configured high grid \
             {}x{}x{} @ {} mm",
            row.id,
            density.grid_summary(),
            g.nx,
            g.ny,
            g.nz,
            g.spacing_mm
        )));
    }
    let sdf_full = SdfGrid::attach(read_volume(cohort, row, "sdf_full", PayloadKind::SdfMm)?);
    let sdf_partial = SdfGrid::attach(read_volume(cohort, row, "sdf_partial", PayloadKind::SdfMm)?);
    prepare_from_parts(
        &row.id,
        row.seed,
        demographics_of(row),
        density,
        sdf_full,
        sdf_partial,
        cfg.pipeline.factor,
    )
    .map_err(CliError::from)
}

pub fn train(
    cfg: &ExperimentConfig,
    stage: u8,
    cohort: &Path,
    out: &Path,
    resume: bool,
) -> Result<()> {
    if !(1..=3).contains(&stage) {
        return Err(CliError::Usage(format!("--stage must be 1, 2, or 3, got {stage}")));
    }
    let rows = read_rows(cohort)?;
    let stats = training_stats(cfg, &rows)?;
    let mut subjects = Vec::with_capacity(cfg.n_train);
    for row in &rows[..cfg.n_train] {
        subjects.push(load_subject(cohort, row, cfg)?);
    }

    let trained = if resume {
        let path = out.join(format!("stage{stage}.ckpt"));
        let ckpt = load_checkpoint::<f32>(&path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        continue_stage(cfg, stage, &subjects, &stats, Some(out), ckpt)?
    } else {
        train_one_stage(cfg, stage, &subjects, &stats, Some(out))?
    };

    let loss = trained.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "stage {stage}: {} optimizer steps done, final loss {loss}, wrote {}",
        trained.opt.step,
        out.join(format!("stage{stage}.ckpt")).display()
    );
    Ok(())
}

/// Deterministic run metadata; wall-clock timings go to stdout instead so
/// reruns of the same command produce byte-identical files.
#[derive(Serialize)]
struct RunInfo<'a> {
    id: &'a str,
    seed: u64,
    subject_index: usize,
    stage_nfe: [u64; 3],
}

pub fn sample(
    cfg: &ExperimentConfig,
    cohort: &Path,
    subject: &str,
    checkpoints: &Path,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let rows = read_rows(cohort)?;
    let idx = rows.iter().position(|r| r.id == subject).ok_or_else(|| {
        CliError::Usage(format!("subject {subject:?} is not in the manifest"))
    })?;
    let stats = training_stats(cfg, &rows)?;
    let sub = load_subject(cohort, &rows[idx], cfg)?;

    let mut models: Vec<UNet<f32>> = Vec::with_capacity(3);
    for stage in 1..=3u8 {
        let path = checkpoints.join(format!("stage{stage}.ckpt"));
        let ckpt = load_checkpoint::<f32>(&path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let expected = stage_unet_config(cfg, stage);
        if ckpt.model.config != expected {
            return Err(CliError::Usage(format!(
                "{}: checkpoint architecture {:?} does not match the configured {:?}",
                path.display(),
                ckpt.model.config,
                expected
            )));
        }
        models.push(ckpt.ema_model());
    }

    let seed = seed.unwrap_or(cfg.master_seed);
    let pipe = volflow_core::cascade::run_pipeline(
        &StageModels { stage1: &models[0], stage2: &models[1], stage3: &models[2] },
        &sub.coarse_sdf_partial,
        stats.z(&sub.demographics),
        &cfg.pipeline,
        seed,
        idx as u64,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let dir = out.join(subject);
    fs::create_dir_all(&dir)?;
    for (name, vol) in [
        ("f_full", &pipe.f_full.vol),
        ("coarse_hu", &pipe.coarse_hu),
        ("high_hu", &pipe.high_hu),
    ] {
        vol.write(&dir.join(format!("{name}.vol3")))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let info = RunInfo {
        id: subject,
        seed,
        subject_index: idx,
        stage_nfe: [pipe.stats[0].nfe, pipe.stats[1].nfe, pipe.stats[2].nfe],
    };
    fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&info).expect("run info serializes"),
    )?;
    println!(
        "sampled {subject}: {} function evaluations, stage walls [{:.1}, {:.1}, {:.1}] s, wrote {}",
        info.stage_nfe.iter().sum::<u64>(),
        pipe.stage_wall_s[0],
        pipe.stage_wall_s[1],
        pipe.stage_wall_s[2],
        dir.display()
    );
    Ok(())
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    cohort: &Path,
    generated: &Path,
    out: &Path,
) -> Result<()> {
    let rows = read_rows(cohort)?;
    if rows.len() < cfg.n_train + 2 {
        return Err(CliError::Usage(format!(
            "manifest holds {} subjects; evaluation needs the training split \
             (n_train = {}) plus at least two held-out subjects",
            rows.len(),
            cfg.n_train
        )));
    }
    let mut pairs: Vec<SubjectPair> = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    for row in &rows[cfg.n_train..] {
        let dir = generated.join(&row.id);
        let f_full_path = dir.join("f_full.vol3");
        let high_path = dir.join("high_hu.vol3");
        if !f_full_path.is_file() || !high_path.is_file() {
            missing.push(row.id.clone());
            continue;
        }
        let sub = load_subject(cohort, row, cfg)?;
        let gen_hu = Volume3::read(&high_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", high_path.display())))?;
        let restored = Volume3::read(&f_full_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", f_full_path.display())))?;
        pairs.push(SubjectPair {
            id: sub.id,
            sex: sub.demographics.sex,
            orig_hu: sub.high_hu,
            gen_hu,
            sdf_gt: sub.coarse_sdf_full,
            sdf_partial: sub.coarse_sdf_partial,
            sdf_restored: SdfGrid::attach(restored),
        });
    }

    let name = cohort
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cohort".to_string());
    let report = evaluate_cohort(&name, &pairs, &missing)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), write_report_csv(&report))?;
    fs::write(out.join("report.json"), report.to_json())?;
    println!(
        "evaluated {} subjects ({} missing), {} metric rows, wrote {}",
        pairs.len(),
        missing.len(),
        report.rows.len(),
        out.display()
    );
    if !missing.is_empty() {
        println!("missing generated volumes for: {}", missing.join(", "));
    }
    Ok(())
}

pub fn experiment(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let outcome = run_experiment(cfg, Some(out))?;
    let s = &outcome.summary;
    println!(
        "experiment done: stage-2 body IoU {:.4}, final losses [{:.4}, {:.4}, {:.4}]",
        s.stage2_body_iou_mean, s.final_losses[0], s.final_losses[1], s.final_losses[2]
    );
    println!(
        "walls: prepare {:.1} s, train [{:.1}, {:.1}, {:.1}] s, sample {:.1} s, evaluate {:.1} s",
        s.phase_wall_s.prepare,
        s.phase_wall_s.train[0],
        s.phase_wall_s.train[1],
        s.phase_wall_s.train[2],
        s.phase_wall_s.sample,
        s.phase_wall_s.evaluate
    );
    println!("{} metric rows, wrote {}", outcome.report.rows.len(), out.display());
    Ok(())
}
