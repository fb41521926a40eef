//! Scratch calibration runner: executes the end-to-end experiment at a
//! candidate scale and prints the gate quantities.

use volflow_core::experiment::{run_experiment, ExperimentConfig};
use volflow_core::sampler::{Method, SamplerConfig};

fn main() {
    let mut cfg = ExperimentConfig::default();
    // candidate harness scale
    cfg.n_train = 64;
    cfg.n_test = 16;
    cfg.steps = [1500, 1500, 1500];
    cfg.batch = 4;
    cfg.pipeline.sampler = SamplerConfig {
        method: Method::Euler,
        n_steps: 32,
        ..SamplerConfig::default()
    };
    eprintln!("config: {cfg:?}");

    let out = run_experiment(&cfg, None).expect("experiment runs");
    let s = &out.summary;
    println!("== phase wall (s): prepare {:.1} train {:?} sample {:.1} eval {:.1}",
        s.phase_wall_s.prepare, s.phase_wall_s.train, s.phase_wall_s.sample, s.phase_wall_s.evaluate);
    println!("== final losses: {:?}", s.final_losses);
    println!("== nfe totals: {:?}", s.nfe_totals);
    println!("== stage2 body IoU mean: {:.4} (gate > 0.8)", s.stage2_body_iou_mean);
    for row in &out.report.rows {
        if row.sex != "all" {
            continue;
        }
        match row.class.as_str() {
            "surface_iou" => println!(
                "== surface IoU: partial {:.4} restored {:.4} (gate: restored > partial)",
                row.mean_orig, row.mean_gen
            ),
            "surface_chamfer_mm" => println!(
                "== chamfer mm: partial {:.2} restored {:.2} ratio {:.3} (gate < 0.2)",
                row.mean_orig,
                row.mean_gen,
                row.mean_gen / row.mean_orig
            ),
            "surface_nmae" => println!(
                "== nmae: partial {:.4} restored {:.4}",
                row.mean_orig, row.mean_gen
            ),
            "liver" => println!(
                "== liver mL: orig {:.1}±{:.1} gen {:.1}±{:.1} diff% {:?} slope {:?} r2 {:?} (gates |diff|<15, r2>0.5)",
                row.mean_orig, row.sd_orig, row.mean_gen, row.sd_gen,
                row.diff_pct, row.slope, row.r2
            ),
            _ => println!(
                "   {}: orig {:.1} gen {:.1} diff% {:?} r2 {:?}",
                row.class, row.mean_orig, row.mean_gen, row.diff_pct, row.r2
            ),
        }
    }
    println!("rows: {}", out.report.rows.len());
}
