//! Clinical-style evaluation battery over paired (generated, ground-truth)
//! volumes: band-segmented tissue volumes, Diff%, OLS slope/R², Bland–Altman
//! limits of agreement, paired t-tests, lung localization distance, and
//! surface restoration quality (Chamfer / IoU / NMAE).
//!
//! Tissue classes come from exact density-band thresholds, which the
//! synthetic volumes satisfy by construction. Labels that share a band
//! (heart/kidney; the two fat compartments) are merged into a single report
//! class because thresholding cannot tell them apart.

mod report;
mod stats;

use std::collections::BTreeMap;

use thiserror::Error;

pub use report::{read_report_csv, write_report_csv, ClassRow, MetricsReport};
pub use stats::{
    bland_altman, diff_percent, mean, ols_slope_r2, paired_t_test, reg_inc_beta,
    sample_sd, student_t_p_two_sided, BlandAltman,
};

use crate::geometry::{
    self, chamfer, extract_surface_points, iou, nmae, OccupancyMask, SdfGrid, Volume3,
};
use crate::phantom::OrganLabel;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("series '{0}' contains a non-finite value")]
    NonFinite(String),
    #[error("series '{label}' has mismatched lengths {orig} vs {gen}")]
    LengthMismatch { label: String, orig: usize, gen: usize },
    #[error("no voxels in the lung band")]
    NoLung,
    #[error("no body voxels above the air threshold")]
    NoBody,
    #[error("subject '{0}': paired volumes have different grids")]
    GridMismatch(String),
    #[error("report parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Density threshold separating body tissue from background air. Air sits at
/// -500 and the lowest tissue band starts at -450, so -475 splits them.
pub const BODY_HU_THRESHOLD: f64 = -475.0;

/// Mask of voxels denser than the air threshold.
pub fn body_occupancy(vol: &Volume3) -> OccupancyMask {
    let mut mask = OccupancyMask::empty(vol.nx, vol.ny, vol.nz, vol.spacing, vol.origin);
    for (o, &v) in mask.vol.data.iter_mut().zip(&vol.data) {
        *o = if (v as f64) > BODY_HU_THRESHOLD { 1.0 } else { 0.0 };
    }
    mask
}

/// Report classes resolvable by density thresholding, with their inclusive
/// bands. Heart and kidney share a band, as do the two fat compartments, so
/// they merge.
pub fn band_classes() -> [(&'static str, (f64, f64)); 6] {
    let wide = |l: OrganLabel| {
        let (lo, hi) = l.hu_band();
        (lo as f64, hi as f64)
    };
    [
        ("lung", wide(OrganLabel::LungAnalog)),
        ("fat", wide(OrganLabel::SubcutaneousFat)),
        ("muscle", wide(OrganLabel::Muscle)),
        ("heart_kidney", wide(OrganLabel::HeartAnalog)),
        ("liver", wide(OrganLabel::LiverAnalog)),
        ("bone", wide(OrganLabel::Bone)),
    ]
}

/// Which generation-time labels fold into each report class.
pub fn class_members(class: &str) -> &'static [OrganLabel] {
    match class {
        "lung" => &[OrganLabel::LungAnalog],
        "fat" => &[OrganLabel::SubcutaneousFat, OrganLabel::VisceralFat],
        "muscle" => &[OrganLabel::Muscle],
        "heart_kidney" => &[OrganLabel::HeartAnalog, OrganLabel::KidneyAnalog],
        "liver" => &[OrganLabel::LiverAnalog],
        "bone" => &[OrganLabel::Bone],
        _ => &[],
    }
}

/// Threshold a density volume into one occupancy mask per report class.
pub fn segment_by_bands(vol: &Volume3) -> BTreeMap<&'static str, OccupancyMask> {
    let classes = band_classes();
    let mut masks: BTreeMap<&'static str, OccupancyMask> = classes
        .iter()
        .map(|(name, _)| {
            (*name, OccupancyMask::empty(vol.nx, vol.ny, vol.nz, vol.spacing, vol.origin))
        })
        .collect();
    for k in 0..vol.nz {
        for j in 0..vol.ny {
            for i in 0..vol.nx {
                let v = vol.at(i, j, k) as f64;
                for (name, (lo, hi)) in &classes {
                    if v >= *lo && v <= *hi {
                        masks.get_mut(name).unwrap().set(i, j, k, true);
                        break;
                    }
                }
            }
        }
    }
    masks
}

/// Per-class tissue volumes in milliliters: voxel count × spacing³ / 1000.
pub fn band_volumes_ml(vol: &Volume3) -> BTreeMap<&'static str, f64> {
    let vox_ml = (vol.spacing as f64).powi(3) / 1000.0;
    segment_by_bands(vol)
        .into_iter()
        .map(|(name, mask)| (name, mask.count() as f64 * vox_ml))
        .collect()
}

/// Vertical distance in mm from the top occupied body slice down to the
/// lowest lung-band voxel. The top body slice stands in for the shoulder
/// apex of the torso.
pub fn lung_localization(vol: &Volume3) -> Result<f64> {
    let (lung_lo, lung_hi) = OrganLabel::LungAnalog.hu_band();
    let (lung_lo, lung_hi) = (lung_lo as f64, lung_hi as f64);
    let mut top_body: Option<usize> = None;
    let mut min_lung: Option<usize> = None;
    for k in 0..vol.nz {
        for j in 0..vol.ny {
            for i in 0..vol.nx {
                let v = vol.at(i, j, k) as f64;
                if v > BODY_HU_THRESHOLD {
                    top_body = Some(k);
                }
                if v >= lung_lo && v <= lung_hi && min_lung.is_none() {
                    min_lung = Some(k);
                }
            }
        }
    }
    let top = top_body.ok_or(MetricsError::NoBody)?;
    let lung = min_lung.ok_or(MetricsError::NoLung)?;
    Ok((top as f64 - lung as f64) * vol.spacing as f64)
}

/// Per-subject paired measurements for one metric class.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    pub label: String,
    pub units: String,
    /// (original, generated) per subject.
    pub pairs: Vec<(f64, f64)>,
}

impl PairedSeries {
    pub fn new(label: &str, units: &str, orig: &[f64], gen: &[f64]) -> Result<Self> {
        if orig.len() != gen.len() {
            return Err(MetricsError::LengthMismatch {
                label: label.to_string(),
                orig: orig.len(),
                gen: gen.len(),
            });
        }
        if orig.len() < 2 {
            return Err(MetricsError::TooFewSubjects { needed: 2, got: orig.len() });
        }
        if orig.iter().chain(gen).any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite(label.to_string()));
        }
        Ok(PairedSeries {
            label: label.to_string(),
            units: units.to_string(),
            pairs: orig.iter().copied().zip(gen.iter().copied()).collect(),
        })
    }

    pub fn orig(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn gen(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Full paired-statistics summary for one series. Statistics whose
/// preconditions fail (zero variance, too few points) are absent rather
/// than fabricated.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsSummary {
    pub n: usize,
    pub mean_orig: f64,
    pub sd_orig: f64,
    pub mean_gen: f64,
    pub sd_gen: f64,
    pub diff_percent: Option<f64>,
    /// Subjects dropped from Diff% because the original value was zero.
    pub excluded_zero_orig: usize,
    pub slope: Option<f64>,
    pub r2: Option<f64>,
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
}

impl StatsSummary {
    pub fn from_series(series: &PairedSeries) -> Result<Self> {
        let orig = series.orig();
        let gen = series.gen();
        let (dp, excluded) = diff_percent(&orig, &gen);
        let (slope, r2) = match ols_slope_r2(&orig, &gen) {
            Ok((s, r)) => (Some(s), Some(r)),
            Err(_) => (None, None),
        };
        let ba = bland_altman(&orig, &gen)?;
        let (t_stat, p_value) = match paired_t_test(&orig, &gen) {
            Ok((t, p)) => (Some(t), Some(p)),
            Err(_) => (None, None),
        };
        Ok(StatsSummary {
            n: series.pairs.len(),
            mean_orig: mean(&orig),
            sd_orig: sample_sd(&orig),
            mean_gen: mean(&gen),
            sd_gen: sample_sd(&gen),
            diff_percent: dp,
            excluded_zero_orig: excluded,
            slope,
            r2,
            bias: ba.bias,
            loa_low: ba.loa_low,
            loa_high: ba.loa_high,
            t_stat,
            p_value,
        })
    }
}

/// Everything needed to evaluate one subject: the ground-truth and generated
/// density volumes plus the three surfaces (truth, partial input, restored).
#[derive(Debug, Clone)]
pub struct SubjectPair {
    pub id: String,
    /// 0 = female, 1 = male.
    pub sex: u8,
    pub orig_hu: Volume3,
    pub gen_hu: Volume3,
    pub sdf_gt: SdfGrid,
    pub sdf_partial: SdfGrid,
    pub sdf_restored: SdfGrid,
}

/// Metric classes reported beyond the density bands.
pub const EXTRA_CLASSES: [&str; 4] =
    ["lung_localization_mm", "surface_chamfer_mm", "surface_iou", "surface_nmae"];

struct SubjectMetrics {
    sex: u8,
    /// (orig, gen) mL per band class, aligned with `band_classes()` order.
    band_ml: Vec<(f64, f64)>,
    lung_loc: Option<(f64, f64)>,
    chamfer_mm: (f64, f64),
    iou_frac: (f64, f64),
    nmae_frac: (f64, f64),
}

fn subject_metrics(pair: &SubjectPair) -> Result<SubjectMetrics> {
    let o = &pair.orig_hu;
    let g = &pair.gen_hu;
    if (o.nx, o.ny, o.nz) != (g.nx, g.ny, g.nz) || o.spacing != g.spacing {
        return Err(MetricsError::GridMismatch(pair.id.clone()));
    }
    let vol_o = band_volumes_ml(o);
    let vol_g = band_volumes_ml(g);
    let band_ml = band_classes()
        .iter()
        .map(|(name, _)| (vol_o[name], vol_g[name]))
        .collect();
    let lung_loc = match (lung_localization(o), lung_localization(g)) {
        (Ok(a), Ok(b)) => Some((a, b)),
        _ => None,
    };
    let gt_pts = extract_surface_points(&pair.sdf_gt)?;
    let partial_pts = extract_surface_points(&pair.sdf_partial)?;
    let restored_pts = extract_surface_points(&pair.sdf_restored)?;
    let gt_occ = pair.sdf_gt.occupancy();
    Ok(SubjectMetrics {
        sex: pair.sex,
        band_ml,
        lung_loc,
        chamfer_mm: (chamfer(&partial_pts, &gt_pts)?, chamfer(&restored_pts, &gt_pts)?),
        iou_frac: (
            iou(&pair.sdf_partial.occupancy(), &gt_occ)?,
            iou(&pair.sdf_restored.occupancy(), &gt_occ)?,
        ),
        nmae_frac: (
            nmae(&pair.sdf_partial, &pair.sdf_gt)?,
            nmae(&pair.sdf_restored, &pair.sdf_gt)?,
        ),
    })
}

fn units_for(class: &str) -> &'static str {
    match class {
        "lung_localization_mm" | "surface_chamfer_mm" => "mm",
        "surface_iou" | "surface_nmae" => "fraction",
        _ => "mL",
    }
}

/// Evaluate a cohort of paired subjects into a stratified report: one row
/// per (sex stratum, metric class), strata being all / female / male.
/// Subjects that could not be paired upstream are listed, not fatal.
pub fn evaluate_cohort(
    cohort: &str,
    pairs: &[SubjectPair],
    missing: &[String],
) -> Result<MetricsReport> {
    if pairs.len() < 2 {
        return Err(MetricsError::TooFewSubjects { needed: 2, got: pairs.len() });
    }
    let per_subject: Vec<SubjectMetrics> =
        pairs.iter().map(subject_metrics).collect::<Result<_>>()?;

    let band_names: Vec<&'static str> =
        band_classes().iter().map(|(n, _)| *n).collect();
    let mut rows = Vec::new();
    for (stratum, want_sex) in
        [("all", None), ("female", Some(0u8)), ("male", Some(1u8))]
    {
        let subset: Vec<&SubjectMetrics> = per_subject
            .iter()
            .filter(|m| want_sex.map_or(true, |s| m.sex == s))
            .collect();
        if subset.len() < 2 {
            continue;
        }
        let mut push_row = |class: &str, orig: Vec<f64>, gen: Vec<f64>| -> Result<()> {
            if orig.len() < 2 {
                return Ok(());
            }
            let series = PairedSeries::new(class, units_for(class), &orig, &gen)?;
            let s = StatsSummary::from_series(&series)?;
            rows.push(ClassRow::from_summary(cohort, stratum, class, &s));
            Ok(())
        };
        for (ci, name) in band_names.iter().enumerate() {
            let orig: Vec<f64> = subset.iter().map(|m| m.band_ml[ci].0).collect();
            let gen: Vec<f64> = subset.iter().map(|m| m.band_ml[ci].1).collect();
            push_row(name, orig, gen)?;
        }
        let loc: Vec<(f64, f64)> =
            subset.iter().filter_map(|m| m.lung_loc).collect();
        push_row(
            "lung_localization_mm",
            loc.iter().map(|p| p.0).collect(),
            loc.iter().map(|p| p.1).collect(),
        )?;
        let surface: [(&str, fn(&SubjectMetrics) -> (f64, f64)); 3] = [
            ("surface_chamfer_mm", |m| m.chamfer_mm),
            ("surface_iou", |m| m.iou_frac),
            ("surface_nmae", |m| m.nmae_frac),
        ];
        for (class, field) in surface {
            let orig: Vec<f64> = subset.iter().map(|m| field(m).0).collect();
            let gen: Vec<f64> = subset.iter().map(|m| field(m).1).collect();
            push_row(class, orig, gen)?;
        }
    }

    Ok(MetricsReport {
        cohort: cohort.to_string(),
        header: "tissue classes from exact density-band thresholds; \
                 shared-band labels merged (heart_kidney, fat)"
            .to_string(),
        n_subjects: pairs.len(),
        missing: missing.to_vec(),
        rows,
    })
}
