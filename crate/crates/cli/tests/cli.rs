//! End-to-end tests of the `volflow` binary: each subcommand is exercised
//! through real processes on a miniature configuration, checking artifacts,
//! determinism, and the exit-code contract (0 ok, 1 runtime, 2 usage).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use volflow_core::experiment::{prepare_from_parts, ExperimentConfig};
use volflow_core::nn::OptimizerConfig;
use volflow_core::phantom::{read_manifest, CohortSampler, GridSpec};
use volflow_core::sampler::{Method, SamplerConfig};
use volflow_core::cascade::PipelineConfig;
use volflow_core::{SdfGrid, Volume3};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_volflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Miniature but structurally complete configuration: 8^3 coarse grid,
/// 16^3 high grid, two optimizer steps per stage.
fn tiny_config() -> ExperimentConfig {
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
        optim: OptimizerConfig { total_steps: 4, ..OptimizerConfig::default() },
        ema_beta: 0.5,
        cohort: CohortSampler::default(),
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, toml::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn gen_cohort(dir: &Path, cfg_path: &Path) -> PathBuf {
    let cohort = dir.join("cohort");
    let out = run(&[
        "gen-cohort",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        cohort.to_str().unwrap(),
    ]);
    assert_ok(&out);
    cohort
}

#[test]
fn config_print_defaults_round_trips() {
    let out = run(&["config", "--print-defaults"]);
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed: ExperimentConfig = toml::from_str(&text).expect("defaults parse as TOML");
    assert_eq!(parsed, ExperimentConfig::default());

    // no action requested
    assert_code(&run(&["config"]), 2);
}

#[test]
fn config_check_validates_files() {
    let tmp = TempDir::new().unwrap();
    let good = write_config(tmp.path(), &tiny_config());
    assert_ok(&run(&["config", "--check", good.to_str().unwrap()]));

    let mut bad_cfg = tiny_config();
    bad_cfg.coarse.nz = 9; // not divisible by the network's extent divisor
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, toml::to_string_pretty(&bad_cfg).unwrap()).unwrap();
    assert_code(&run(&["config", "--check", bad.to_str().unwrap()]), 2);

    let junk = tmp.path().join("junk.toml");
    fs::write(&junk, "not = [valid").unwrap();
    assert_code(&run(&["config", "--check", junk.to_str().unwrap()]), 2);
}

#[test]
fn threads_flag_is_validated() {
    assert_ok(&run(&["--threads", "2", "config", "--print-defaults"]));
    assert_code(&run(&["--threads", "0", "config", "--print-defaults"]), 2);
    let out = bin()
        .env("VOLFLOW_THREADS", "abc")
        .args(["config", "--print-defaults"])
        .output()
        .unwrap();
    assert_code(&out, 2);
}

#[test]
fn gen_cohort_writes_manifest_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let a = gen_cohort(tmp.path(), &cfg);
    let b = tmp.path().join("cohort_b");
    assert_ok(&run(&[
        "gen-cohort",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]));

    let manifest_a = fs::read(a.join("manifest.jsonl")).unwrap();
    let manifest_b = fs::read(b.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest_a, manifest_b, "manifests differ between identical runs");

    let rows = read_manifest(&String::from_utf8(manifest_a).unwrap()).unwrap();
    assert_eq!(rows.len(), 5); // n_train + n_test
    for row in &rows {
        assert_eq!(row.files.len(), 3);
        for rel in row.files.values() {
            let fa = fs::read(a.join(rel)).unwrap();
            let fb = fs::read(b.join(rel)).unwrap();
            assert!(!fa.is_empty());
            assert_eq!(fa, fb, "{rel} differs between identical runs");
        }
    }

    // --out is required
    assert_code(&run(&["gen-cohort", "--config", cfg.to_str().unwrap()]), 2);
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let full_cfg = {
        let mut c = tiny_config();
        c.steps = [4, 2, 2];
        c
    };
    let cfg4 = write_config(tmp.path(), &full_cfg);
    let cohort = gen_cohort(tmp.path(), &cfg4);

    // uninterrupted: 4 steps in one command
    let out_a = tmp.path().join("train_a");
    assert_ok(&run(&[
        "train", "--stage", "1",
        "--config", cfg4.to_str().unwrap(),
        "--cohort", cohort.to_str().unwrap(),
        "--out", out_a.to_str().unwrap(),
    ]));

    // interrupted: 2 steps, then resume to 4 under the full config
    let part_cfg = {
        let mut c = full_cfg.clone();
        c.steps = [2, 2, 2];
        c
    };
    let cfg2 = tmp.path().join("config2.toml");
    fs::write(&cfg2, toml::to_string_pretty(&part_cfg).unwrap()).unwrap();
    let out_b = tmp.path().join("train_b");
    assert_ok(&run(&[
        "train", "--stage", "1",
        "--config", cfg2.to_str().unwrap(),
        "--cohort", cohort.to_str().unwrap(),
        "--out", out_b.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "train", "--stage", "1", "--resume",
        "--config", cfg4.to_str().unwrap(),
        "--cohort", cohort.to_str().unwrap(),
        "--out", out_b.to_str().unwrap(),
    ]));

    let ckpt_a = fs::read(out_a.join("stage1.ckpt")).unwrap();
    let ckpt_b = fs::read(out_b.join("stage1.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "resumed checkpoint differs from uninterrupted one");

    // resuming under a different architecture is a config error
    let mismatched = {
        let mut c = full_cfg.clone();
        c.base_channels = 8;
        c
    };
    let cfg_m = tmp.path().join("config_m.toml");
    fs::write(&cfg_m, toml::to_string_pretty(&mismatched).unwrap()).unwrap();
    assert_code(
        &run(&[
            "train", "--stage", "1", "--resume",
            "--config", cfg_m.to_str().unwrap(),
            "--cohort", cohort.to_str().unwrap(),
            "--out", out_b.to_str().unwrap(),
        ]),
        2,
    );

    // resuming without a checkpoint is a runtime error
    let empty = tmp.path().join("train_empty");
    fs::create_dir_all(&empty).unwrap();
    assert_code(
        &run(&[
            "train", "--stage", "1", "--resume",
            "--config", cfg4.to_str().unwrap(),
            "--cohort", cohort.to_str().unwrap(),
            "--out", empty.to_str().unwrap(),
        ]),
        1,
    );

    // --stage outside 1..=3 is a usage error
    assert_code(
        &run(&[
            "train", "--stage", "4",
            "--config", cfg4.to_str().unwrap(),
            "--cohort", cohort.to_str().unwrap(),
            "--out", out_a.to_str().unwrap(),
        ]),
        2,
    );
}

fn train_all_stages(cfg_path: &Path, cohort: &Path, out: &Path) {
    for stage in ["1", "2", "3"] {
        assert_ok(&run(&[
            "train", "--stage", stage,
            "--config", cfg_path.to_str().unwrap(),
            "--cohort", cohort.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]));
    }
}

#[test]
fn sample_writes_all_volumes_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let cohort = gen_cohort(tmp.path(), &cfg);
    let ckpts = tmp.path().join("ckpts");
    train_all_stages(&cfg, &cohort, &ckpts);

    let rows =
        read_manifest(&fs::read_to_string(cohort.join("manifest.jsonl")).unwrap()).unwrap();
    let subject = &rows[3].id; // first held-out subject

    let s1 = tmp.path().join("gen_a");
    let s2 = tmp.path().join("gen_b");
    for out_dir in [&s1, &s2] {
        assert_ok(&run(&[
            "sample",
            "--config", cfg.to_str().unwrap(),
            "--cohort", cohort.to_str().unwrap(),
            "--subject", subject,
            "--checkpoints", ckpts.to_str().unwrap(),
            "--out", out_dir.to_str().unwrap(),
        ]));
    }
    for name in ["f_full.vol3", "coarse_hu.vol3", "high_hu.vol3", "run.json"] {
        let fa = fs::read(s1.join(subject).join(name)).unwrap();
        let fb = fs::read(s2.join(subject).join(name)).unwrap();
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{name} differs between identical runs");
    }
    // the volumes parse and sit on the expected grids
    let high = Volume3::read(&s1.join(subject).join("high_hu.vol3")).unwrap();
    assert_eq!((high.nx, high.ny, high.nz), (16, 16, 16));
    let coarse = Volume3::read(&s1.join(subject).join("coarse_hu.vol3")).unwrap();
    assert_eq!((coarse.nx, coarse.ny, coarse.nz), (8, 8, 8));

    // unknown subject id is a usage error
    assert_code(
        &run(&[
            "sample",
            "--config", cfg.to_str().unwrap(),
            "--cohort", cohort.to_str().unwrap(),
            "--subject", "nobody",
            "--checkpoints", ckpts.to_str().unwrap(),
            "--out", s1.to_str().unwrap(),
        ]),
        2,
    );
    // missing checkpoint directory is a runtime error
    assert_code(
        &run(&[
            "sample",
            "--config", cfg.to_str().unwrap(),
            "--cohort", cohort.to_str().unwrap(),
            "--subject", subject,
            "--checkpoints", tmp.path().join("nowhere").to_str().unwrap(),
            "--out", s1.to_str().unwrap(),
        ]),
        1,
    );
}

#[test]
fn evaluate_scores_generated_volumes() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_config();
    cfg.n_train = 2;
    cfg.n_test = 3;
    let cfg_path = write_config(tmp.path(), &cfg);
    let cohort = gen_cohort(tmp.path(), &cfg_path);

    // fake a generator that returns the ground truth for two of the three
    // held-out subjects, leaving one missing
    let rows =
        read_manifest(&fs::read_to_string(cohort.join("manifest.jsonl")).unwrap()).unwrap();
    let generated = tmp.path().join("generated");
    for row in &rows[cfg.n_train..cfg.n_train + 2] {
        let high = Volume3::read(&cohort.join(&row.files["density"])).unwrap();
        let sdf_full = SdfGrid::attach(Volume3::read(&cohort.join(&row.files["sdf_full"])).unwrap());
        let sdf_partial =
            SdfGrid::attach(Volume3::read(&cohort.join(&row.files["sdf_partial"])).unwrap());
        let sub = prepare_from_parts(
            &row.id,
            row.seed,
            volflow_core::Demographics {
                age: row.age,
                sex: row.sex,
                height_cm: row.height_cm,
                weight_kg: row.weight_kg,
            },
            high.clone(),
            sdf_full,
            sdf_partial,
            cfg.pipeline.factor,
        )
        .unwrap();
        let dir = generated.join(&row.id);
        fs::create_dir_all(&dir).unwrap();
        high.write(&dir.join("high_hu.vol3")).unwrap();
        sub.coarse_sdf_full.vol.write(&dir.join("f_full.vol3")).unwrap();
    }

    let report_dir = tmp.path().join("report");
    let out = run(&[
        "evaluate",
        "--config", cfg_path.to_str().unwrap(),
        "--cohort", cohort.to_str().unwrap(),
        "--generated", generated.to_str().unwrap(),
        "--out", report_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let csv = fs::read_to_string(report_dir.join("report.csv")).unwrap();
    let report = volflow_core::metrics::read_report_csv(&csv).unwrap();
    assert!(!report.rows.is_empty());
    // a perfect generator scores zero volume error on every populated band
    for row in report.rows.iter().filter(|r| r.sex == "all") {
        if let Some(d) = row.diff_pct {
            if !row.class.starts_with("surface") && row.class != "lung_localization_mm" {
                assert!(d.abs() < 1e-9, "class {} diff {d}", row.class);
            }
        }
    }
    let json: volflow_core::metrics::MetricsReport = volflow_core::metrics::MetricsReport::from_json(
        &fs::read_to_string(report_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(json.missing, vec![rows[cfg.n_train + 2].id.clone()]);

    // with no generated volumes at all there is nothing to score
    let report2 = tmp.path().join("report2");
    assert_code(
        &run(&[
            "evaluate",
            "--config", cfg_path.to_str().unwrap(),
            "--cohort", cohort.to_str().unwrap(),
            "--generated", tmp.path().join("void").to_str().unwrap(),
            "--out", report2.to_str().unwrap(),
        ]),
        1,
    );
}

#[test]
fn experiment_runs_end_to_end_and_matches_manual_pipeline() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out_dir = tmp.path().join("exp");
    assert_ok(&run(&[
        "experiment",
        "--config", cfg.to_str().unwrap(),
        "--out", out_dir.to_str().unwrap(),
    ]));
    for name in [
        "cohort.jsonl",
        "stage1.ckpt", "stage2.ckpt", "stage3.ckpt",
        "stage1_loss.csv", "stage2_loss.csv", "stage3_loss.csv",
        "report.csv", "report.json", "summary.json",
    ] {
        assert!(out_dir.join(name).is_file(), "missing artifact {name}");
    }

    // the per-command path reproduces the experiment's stage-1 checkpoint:
    // same cohort, same training stream, same seed
    let cohort = gen_cohort(tmp.path(), &cfg);
    let train_out = tmp.path().join("manual");
    assert_ok(&run(&[
        "train", "--stage", "1",
        "--config", cfg.to_str().unwrap(),
        "--cohort", cohort.to_str().unwrap(),
        "--out", train_out.to_str().unwrap(),
    ]));
    let from_experiment = fs::read(out_dir.join("stage1.ckpt")).unwrap();
    let from_command = fs::read(train_out.join("stage1.ckpt")).unwrap();
    assert_eq!(
        from_experiment, from_command,
        "stand-alone training diverged from the experiment's stage-1 run"
    );
}
