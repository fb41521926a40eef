//! Procedural phantom torsos: paired (demographics, surface, density,
//! organ masks) records with a known, learnable coupling.
//!
//! A phantom is a tapered superellipsoid body whose girth follows weight
//! and sex and whose height follows stature. Depth below the surface
//! selects subcutaneous fat, then muscle; the remaining core holds
//! ellipsoidal organ analogs at fixed fractional positions whose sizes are
//! affine in (height, weight, sex) plus 5% seeded jitter. Every tissue
//! writes densities inside its own disjoint HU band, so generated volumes
//! can be segmented exactly by thresholding.

mod build;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, OccupancyMask, SdfGrid, Volume3};

pub use build::generate_phantom;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid demographics: {0}")]
    InvalidDemographics(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

/// Subject covariates conditioning the generative model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    /// Years, in [18, 95].
    pub age: f64,
    /// 0 = female, 1 = male.
    pub sex: u8,
    /// Centimeters, in [140, 200].
    pub height_cm: f64,
    /// Kilograms, in [40, 150].
    pub weight_kg: f64,
}

impl Demographics {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("age", self.age, 18.0, 95.0),
            ("height_cm", self.height_cm, 140.0, 200.0),
            ("weight_kg", self.weight_kg, 40.0, 150.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(PhantomError::InvalidDemographics(format!(
                    "{name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        if self.sex > 1 {
            return Err(PhantomError::InvalidDemographics(format!(
                "sex = {} (expected 0 or 1)",
                self.sex
            )));
        }
        Ok(())
    }

    /// Position within the validity range, each in [0, 1].
    pub(crate) fn normalized(&self) -> (f64, f64, f64, f64) {
        (
            (self.height_cm - 140.0) / 60.0,
            (self.weight_kg - 40.0) / 110.0,
            self.sex as f64,
            (self.age - 18.0) / 77.0,
        )
    }
}

/// Tissue classes with non-overlapping HU bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OrganLabel {
    LungAnalog,
    HeartAnalog,
    LiverAnalog,
    KidneyAnalog,
    Muscle,
    SubcutaneousFat,
    VisceralFat,
    Bone,
}

/// HU of empty space.
pub const AIR_HU: f32 = -500.0;

impl OrganLabel {
    pub const ALL: [OrganLabel; 8] = [
        OrganLabel::LungAnalog,
        OrganLabel::HeartAnalog,
        OrganLabel::LiverAnalog,
        OrganLabel::KidneyAnalog,
        OrganLabel::Muscle,
        OrganLabel::SubcutaneousFat,
        OrganLabel::VisceralFat,
        OrganLabel::Bone,
    ];

    /// Inclusive HU band for this tissue. Fat compartments share a band and
    /// are distinguished by placement (shell vs interior), mirroring how
    /// they are evaluated.
    pub fn hu_band(self) -> (f32, f32) {
        match self {
            OrganLabel::LungAnalog => (-450.0, -350.0),
            OrganLabel::SubcutaneousFat | OrganLabel::VisceralFat => (-150.0, -50.0),
            OrganLabel::Muscle => (20.0, 60.0),
            OrganLabel::HeartAnalog | OrganLabel::KidneyAnalog => (61.0, 79.0),
            OrganLabel::LiverAnalog => (80.0, 120.0),
            OrganLabel::Bone => (300.0, 500.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OrganLabel::LungAnalog => "lung",
            OrganLabel::HeartAnalog => "heart",
            OrganLabel::LiverAnalog => "liver",
            OrganLabel::KidneyAnalog => "kidney",
            OrganLabel::Muscle => "muscle",
            OrganLabel::SubcutaneousFat => "subcutaneous_fat",
            OrganLabel::VisceralFat => "visceral_fat",
            OrganLabel::Bone => "bone",
        }
    }
}

/// Grid geometry for generation; the origin centers the volume on (0,0,0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing_mm: f32,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 || self.nz < 8 {
            return Err(PhantomError::InvalidGrid(format!(
                "extents {}x{}x{} too small (need at least 8 per axis)",
                self.nx, self.ny, self.nz
            )));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(PhantomError::InvalidGrid(format!(
                "spacing {} must be positive",
                self.spacing_mm
            )));
        }
        Ok(())
    }

    pub fn origin(&self) -> [f32; 3] {
        [
            -0.5 * self.nx as f32 * self.spacing_mm,
            -0.5 * self.ny as f32 * self.spacing_mm,
            -0.5 * self.nz as f32 * self.spacing_mm,
        ]
    }
}

/// Default high-resolution grid: 32x32x48 at 4 mm.
pub fn default_high_grid() -> GridSpec {
    GridSpec { nx: 32, ny: 32, nz: 48, spacing_mm: 4.0 }
}

/// Default coarse grid: 16x16x24 at 8 mm (half the high resolution).
pub fn default_coarse_grid() -> GridSpec {
    GridSpec { nx: 16, ny: 16, nz: 24, spacing_mm: 8.0 }
}

/// One generated subject.
#[derive(Debug, Clone)]
pub struct PhantomRecord {
    pub id: String,
    pub seed: u64,
    pub demographics: Demographics,
    /// HU density on the generation grid.
    pub density: Volume3,
    pub body: OccupancyMask,
    pub organ_masks: BTreeMap<OrganLabel, OccupancyMask>,
    pub sdf_full: SdfGrid,
    pub sdf_partial: SdfGrid,
    /// Organs whose jitter had to be clamped to stay inside the body.
    pub jitter_clamped: Vec<OrganLabel>,
}

/// Per-sex Gaussian demographic model for cohort sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSampler {
    pub male_fraction: f64,
    pub male_height: (f64, f64),
    pub male_weight: (f64, f64),
    pub female_height: (f64, f64),
    pub female_weight: (f64, f64),
    pub age: (f64, f64),
}

impl Default for CohortSampler {
    fn default() -> Self {
        CohortSampler {
            male_fraction: 0.5,
            male_height: (175.0, 9.0),
            male_weight: (90.0, 17.0),
            female_height: (164.0, 7.0),
            female_weight: (71.0, 16.0),
            age: (60.0, 15.0),
        }
    }
}

/// Draws demographics for record `index` from streams keyed by the master
/// seed, independent of every other record.
pub fn sample_demographics(master_seed: u64, index: u64, sampler: &CohortSampler) -> Demographics {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let mut r = crate::rng::stream_keyed(master_seed, "cohort/demo", &[index]);
    let sex = u8::from(r.gen_bool(sampler.male_fraction));
    let (h, w) = if sex == 1 {
        (sampler.male_height, sampler.male_weight)
    } else {
        (sampler.female_height, sampler.female_weight)
    };
    let height = Normal::new(h.0, h.1).unwrap().sample(&mut r).clamp(140.0, 200.0);
    let weight = Normal::new(w.0, w.1).unwrap().sample(&mut r).clamp(40.0, 150.0);
    let age = Normal::new(sampler.age.0, sampler.age.1).unwrap().sample(&mut r).clamp(18.0, 95.0);
    Demographics { age, sex, height_cm: height, weight_kg: weight }
}

/// Generates `n` records with ids `p0000..`, one derived stream per record.
pub fn generate_cohort(
    n: usize,
    master_seed: u64,
    sampler: &CohortSampler,
    grid: GridSpec,
) -> Result<Vec<PhantomRecord>> {
    use rand::Rng;
    assert!(n >= 1, "cohort size must be at least 1");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let demo = sample_demographics(master_seed, i as u64, sampler);
        let record_seed: u64 =
            crate::rng::stream_keyed(master_seed, "cohort/record-seed", &[i as u64]).gen();
        let mut rec = generate_phantom(record_seed, demo, grid)?;
        rec.id = format!("p{i:04}");
        out.push(rec);
    }
    Ok(out)
}

/// One line of the cohort manifest (serialized as JSON, one object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub age: f64,
    pub sex: u8,
    pub height_cm: f64,
    pub weight_kg: f64,
    /// Logical name ("density", "sdf_full", mask names, ...) to file path.
    pub files: BTreeMap<String, String>,
}

impl ManifestRow {
    pub fn from_record(rec: &PhantomRecord, files: BTreeMap<String, String>) -> Self {
        ManifestRow {
            id: rec.id.clone(),
            seed: rec.seed,
            age: rec.demographics.age,
            sex: rec.demographics.sex,
            height_cm: rec.demographics.height_cm,
            weight_kg: rec.demographics.weight_kg,
            files,
        }
    }
}

/// Writes rows as JSON lines; output is byte-deterministic for equal input.
pub fn write_manifest<W: Write>(w: &mut W, rows: &[ManifestRow]) -> std::io::Result<()> {
    for row in rows {
        let line = serde_json::to_string(row).expect("manifest row serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest(text: &str) -> std::result::Result<Vec<ManifestRow>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Block-mean pooling; spacing scales by `factor`, origin is unchanged.
pub fn downsample(v: &Volume3, factor: usize) -> Result<Volume3> {
    assert!(factor >= 1, "factor must be at least 1");
    if v.nx % factor != 0 || v.ny % factor != 0 || v.nz % factor != 0 {
        return Err(PhantomError::InvalidGrid(format!(
            "extents {}x{}x{} not divisible by {factor}",
            v.nx, v.ny, v.nz
        )));
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let (nx, ny, nz) = (v.nx / factor, v.ny / factor, v.nz / factor);
    let mut out = Volume3::zeros(nx, ny, nz, v.spacing * factor as f32, v.origin, v.kind);
    let inv = 1.0 / (factor * factor * factor) as f64;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut acc = 0.0f64;
                for dk in 0..factor {
                    for dj in 0..factor {
                        for di in 0..factor {
                            acc += v.at(i * factor + di, j * factor + dj, k * factor + dk) as f64;
                        }
                    }
                }
                out.set(i, j, k, (acc * inv) as f32);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PayloadKind;

    fn demo(h: f64, w: f64, sex: u8) -> Demographics {
        Demographics { age: 50.0, sex, height_cm: h, weight_kg: w }
    }

    #[test]
    fn demographics_validation() {
        assert!(demo(170.0, 80.0, 1).validate().is_ok());
        assert!(demo(139.0, 80.0, 1).validate().is_err());
        assert!(demo(170.0, 151.0, 0).validate().is_err());
        assert!(Demographics { age: 17.0, ..demo(170.0, 80.0, 0) }.validate().is_err());
        assert!(Demographics { sex: 2, ..demo(170.0, 80.0, 0) }.validate().is_err());
    }

    #[test]
    fn hu_bands_are_disjoint() {
        let mut bands: Vec<(f32, f32)> = OrganLabel::ALL.iter().map(|l| l.hu_band()).collect();
        bands.push((AIR_HU, AIR_HU));
        bands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        bands.dedup();
        for pair in bands.windows(2) {
            assert!(pair[0].1 < pair[1].0, "bands {pair:?} overlap");
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let g = default_high_grid();
        let d = demo(172.0, 85.0, 1);
        let a = generate_phantom(99, d, g).unwrap();
        let b = generate_phantom(99, d, g).unwrap();
        assert_eq!(a.density.data, b.density.data);
        assert_eq!(a.sdf_full.vol.data, b.sdf_full.vol.data);
        assert_eq!(a.sdf_partial.vol.data, b.sdf_partial.vol.data);
        for (label, mask) in &a.organ_masks {
            assert_eq!(mask.vol.data, b.organ_masks[label].vol.data, "{label:?}");
        }
        let c = generate_phantom(100, d, g).unwrap();
        assert_ne!(a.density.data, c.density.data);
    }

    #[test]
    fn taller_subject_occupies_more_z() {
        let g = default_high_grid();
        let z_extent = |h: f64| {
            let rec = generate_phantom(7, demo(h, 80.0, 1), g).unwrap();
            let v = &rec.body.vol;
            let mut lo = v.nz;
            let mut hi = 0;
            for k in 0..v.nz {
                for j in 0..v.ny {
                    for i in 0..v.nx {
                        if rec.body.is_set(i, j, k) {
                            lo = lo.min(k);
                            hi = hi.max(k);
                        }
                    }
                }
            }
            hi + 1 - lo
        };
        assert!(z_extent(180.0) > z_extent(150.0));
    }

    #[test]
    fn masks_disjoint_and_inside_body() {
        let g = default_high_grid();
        for seed in 0..20u64 {
            let d = sample_demographics(33, seed, &CohortSampler::default());
            let rec = generate_phantom(seed, d, g).unwrap();
            let n = rec.body.vol.numel();
            let mut claimed = vec![false; n];
            for (label, mask) in &rec.organ_masks {
                for idx in 0..n {
                    if mask.is_set_idx(idx) {
                        assert!(rec.body.is_set_idx(idx), "{label:?} outside body, seed {seed}");
                        assert!(!claimed[idx], "{label:?} overlaps another mask, seed {seed}");
                        claimed[idx] = true;
                    }
                }
            }
        }
    }

    #[test]
    fn densities_respect_bands() {
        let g = default_high_grid();
        for seed in [3u64, 14, 59] {
            let d = sample_demographics(26, seed, &CohortSampler::default());
            let rec = generate_phantom(seed, d, g).unwrap();
            let mut covered = vec![false; rec.density.numel()];
            for (label, mask) in &rec.organ_masks {
                let (lo, hi) = label.hu_band();
                for idx in 0..rec.density.numel() {
                    if mask.is_set_idx(idx) {
                        let v = rec.density.data[idx];
                        assert!(
                            (lo..=hi).contains(&v),
                            "{label:?} voxel {idx} HU {v} outside [{lo}, {hi}]"
                        );
                        covered[idx] = true;
                    }
                }
            }
            for idx in 0..rec.density.numel() {
                if !rec.body.is_set_idx(idx) {
                    assert_eq!(rec.density.data[idx], AIR_HU);
                    assert!(!covered[idx]);
                } else {
                    assert!(covered[idx], "body voxel {idx} has no tissue label");
                }
            }
        }
    }

    #[test]
    fn subcutaneous_fat_grows_with_weight() {
        let g = default_high_grid();
        let fat = |w: f64| {
            let rec = generate_phantom(4, demo(170.0, w, 0), g).unwrap();
            rec.organ_masks[&OrganLabel::SubcutaneousFat].count()
        };
        let (a, b, c) = (fat(55.0), fat(90.0), fat(125.0));
        assert!(a < b && b < c, "fat counts {a}, {b}, {c}");
    }

    #[test]
    fn cohort_ids_unique_and_stats_sane() {
        let g = default_coarse_grid();
        let recs = generate_cohort(10, 5, &CohortSampler::default(), g).unwrap();
        let ids: std::collections::BTreeSet<_> = recs.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 10);

        // larger sample for the mean check
        let n = 300;
        let sampler = CohortSampler::default();
        let heights: Vec<f64> = (0..n)
            .map(|i| sample_demographics(77, i, &sampler))
            .filter(|d| d.sex == 1)
            .map(|d| d.height_cm)
            .collect();
        let mean = heights.iter().sum::<f64>() / heights.len() as f64;
        let bound = 3.0 * 9.0 / (heights.len() as f64).sqrt();
        assert!((mean - 175.0).abs() < bound, "male height mean {mean}, bound {bound}");
    }

    #[test]
    fn manifest_round_trips_and_is_deterministic() {
        let g = default_coarse_grid();
        let make = || {
            let recs = generate_cohort(3, 21, &CohortSampler::default(), g).unwrap();
            let rows: Vec<ManifestRow> = recs
                .iter()
                .map(|r| {
                    let mut files = BTreeMap::new();
                    files.insert("density".to_string(), format!("{}/density.vol3", r.id));
                    ManifestRow::from_record(r, files)
                })
                .collect();
            let mut buf = Vec::new();
            write_manifest(&mut buf, &rows).unwrap();
            (rows, buf)
        };
        let (rows, bytes) = make();
        let (_, bytes2) = make();
        assert_eq!(bytes, bytes2);
        let parsed = read_manifest(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn downsample_examples() {
        let mut v = Volume3::zeros(4, 4, 4, 2.0, [0.0; 3], PayloadKind::DensityHu);
        v.data.fill(7.25);
        let d = downsample(&v, 2).unwrap();
        assert_eq!(d.nx, 2);
        assert_eq!(d.spacing, 4.0);
        assert!(d.data.iter().all(|&x| x == 7.25));

        assert_eq!(downsample(&v, 1).unwrap(), v);

        let mut v = Volume3::zeros(2, 2, 2, 1.0, [0.0; 3], PayloadKind::DensityHu);
        v.data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let d = downsample(&v, 2).unwrap();
        assert_eq!(d.data, vec![4.5]);

        let v = Volume3::zeros(3, 4, 4, 1.0, [0.0; 3], PayloadKind::DensityHu);
        assert!(downsample(&v, 2).is_err());
    }
}
