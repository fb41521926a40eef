//! Assembly of a single phantom: body envelope, depth-layered shells,
//! organ placement, and density synthesis.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{compute_sdf, make_partial, OccupancyMask, PayloadKind, SdfGrid, Volume3};
use crate::rng;

use super::{Demographics, GridSpec, OrganLabel, PhantomRecord, Result, AIR_HU};

/// Superellipsoid exponent for the torso cross-section (boxier than an
/// ellipse, rounder than a rectangle).
const BODY_EXPONENT: f64 = 2.5;
/// Cross-section shrink factor from bottom (1.0) to top of the body.
const TAPER_RATE: f64 = 0.09;
/// Relative jitter applied to each organ half-axis.
const JITTER_SIGMA: f64 = 0.05;

/// Physical body envelope derived from demographics.
struct BodyShape {
    /// Half-extents (mm) along x, y at the widest cross-section and z.
    ax: f64,
    ay: f64,
    az: f64,
}

impl BodyShape {
    fn from_demographics(demo: &Demographics, grid: &GridSpec) -> Self {
        let (h, w, s, _a) = demo.normalized();
        let lx = grid.nx as f64 * grid.spacing_mm as f64;
        let ly = grid.ny as f64 * grid.spacing_mm as f64;
        let lz = grid.nz as f64 * grid.spacing_mm as f64;
        // Girth follows weight, with shorter and male subjects carrying it
        // on a wider frame.
        let girth = (0.75 * w + 0.15 * (1.0 - h) + 0.10 * s).clamp(0.0, 1.0);
        BodyShape {
            ax: lx * (0.26 + 0.17 * girth),
            ay: ly * (0.24 + 0.16 * girth),
            az: lz * (0.30 + 0.15 * h),
        }
    }

    /// Signed membership test: `p` is the voxel center relative to the
    /// grid center, in mm.
    fn contains(&self, p: [f64; 3]) -> bool {
        let zeta = p[2] / self.az;
        if zeta.abs() > 1.0 {
            return false;
        }
        let taper = 1.0 - TAPER_RATE * (zeta + 1.0);
        let u = (p[0] / (self.ax * taper)).abs().powf(BODY_EXPONENT);
        let v = (p[1] / (self.ay * taper)).abs().powf(BODY_EXPONENT);
        u + v <= 1.0
    }
}

/// Shell thicknesses (mm): subcutaneous fat outside, muscle inside it.
fn shell_thickness(demo: &Demographics) -> (f64, f64) {
    let (h, w, s, a) = demo.normalized();
    let fat = 3.0 + 10.0 * w + 3.0 * (1.0 - s);
    let muscle = (4.0 + 7.0 * h + 4.0 * s - 3.0 * a).max(2.0);
    (fat, muscle)
}

/// One ellipsoidal organ analog: fractional center and half-axes in the
/// body frame, plus a demographic size multiplier.
struct OrganSpec {
    label: OrganLabel,
    center: [f64; 3],
    half: [f64; 3],
    sigma: f64,
}

/// Organ table in claim order; earlier entries win voxels on overlap.
/// Front-of-body organs sit at negative y so a frontal-only surface scan
/// faces them.
fn organ_table(demo: &Demographics) -> Vec<OrganSpec> {
    let (h, w, s, _a) = demo.normalized();
    let lung = 0.88 + 0.18 * h;
    let heart = 0.90 + 0.15 * w;
    let liver = 0.85 + 0.30 * w + 0.10 * h;
    let kidney = 0.90 + 0.12 * h + 0.05 * s;
    let vfat = 0.55 + 0.75 * w;
    let mut t = vec![
        OrganSpec {
            label: OrganLabel::LungAnalog,
            center: [-0.42, -0.12, 0.42],
            half: [0.27, 0.34, 0.30],
            sigma: lung,
        },
        OrganSpec {
            label: OrganLabel::LungAnalog,
            center: [0.42, -0.12, 0.42],
            half: [0.27, 0.34, 0.30],
            sigma: lung,
        },
        OrganSpec {
            label: OrganLabel::HeartAnalog,
            center: [0.10, -0.16, 0.34],
            half: [0.17, 0.20, 0.16],
            sigma: heart,
        },
        OrganSpec {
            label: OrganLabel::LiverAnalog,
            center: [-0.28, -0.08, 0.02],
            half: [0.40, 0.44, 0.21],
            sigma: liver,
        },
        OrganSpec {
            label: OrganLabel::KidneyAnalog,
            center: [-0.30, 0.26, -0.22],
            half: [0.13, 0.13, 0.17],
            sigma: kidney,
        },
        OrganSpec {
            label: OrganLabel::KidneyAnalog,
            center: [0.30, 0.26, -0.22],
            half: [0.13, 0.13, 0.17],
            sigma: kidney,
        },
    ];
    for center in [[0.0, -0.32, -0.45], [-0.26, -0.26, -0.32], [0.26, -0.26, -0.32]] {
        t.push(OrganSpec {
            label: OrganLabel::VisceralFat,
            center,
            half: [0.14, 0.12, 0.13],
            sigma: vfat,
        });
    }
    t
}

/// Generates one subject on `grid` from a per-record seed. The same
/// (seed, demographics, grid) triple always produces bit-identical output.
pub fn generate_phantom(seed: u64, demographics: Demographics, grid: GridSpec) -> Result<PhantomRecord> {
    demographics.validate()?;
    grid.validate()?;

    let origin = grid.origin();
    let shape = BodyShape::from_demographics(&demographics, &grid);
    let mut body_vol = Volume3::zeros(grid.nx, grid.ny, grid.nz, grid.spacing_mm, origin, PayloadKind::Mask);

    // Voxel centers relative to the grid center (the grid is origin-centered,
    // so the voxel center itself is the body-frame coordinate).
    let center_of = |vol: &Volume3, i: usize, j: usize, k: usize| vol.voxel_center(i, j, k);

    for k in 0..grid.nz {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                if shape.contains(center_of(&body_vol, i, j, k)) {
                    body_vol.set(i, j, k, 1.0);
                }
            }
        }
    }
    let body = OccupancyMask { vol: body_vol };

    // Depth below the skin selects the shell layers.
    let tau = SdfGrid::default_tau(&body.vol);
    let sdf_full = compute_sdf(&body, tau)?;
    let sdf_partial = make_partial(&sdf_full, &body)?;
    let (t_fat, t_mus) = shell_thickness(&demographics);

    let n = body.vol.numel();
    let mut label_of: Vec<Option<OrganLabel>> = vec![None; n];
    let mut core = vec![false; n];
    for idx in 0..n {
        if !body.is_set_idx(idx) {
            continue;
        }
        let depth = sdf_full.vol.data[idx] as f64;
        if depth < t_fat {
            label_of[idx] = Some(OrganLabel::SubcutaneousFat);
        } else if depth < t_fat + t_mus {
            label_of[idx] = Some(OrganLabel::Muscle);
        } else {
            core[idx] = true;
        }
    }

    // Organs claim unclaimed core voxels in table order. An organ whose
    // nominal jittered extent pokes outside the body is redrawn once with
    // jitter clamped to one sigma and noted in the record.
    let mut jitter_rng = rng::stream(seed, "phantom/jitter");
    let jitter_dist = Normal::new(1.0, JITTER_SIGMA).unwrap();
    let mut jitter_clamped = Vec::new();
    let specs = organ_table(&demographics);
    for spec in &specs {
        let mut mult = [0.0f64; 3];
        for m in &mut mult {
            *m = jitter_dist.sample(&mut jitter_rng);
        }
        let center = [
            spec.center[0] * shape.ax,
            spec.center[1] * shape.ay,
            spec.center[2] * shape.az,
        ];
        let axes = |mult: &[f64; 3]| {
            [
                spec.half[0] * shape.ax * spec.sigma * mult[0],
                spec.half[1] * shape.ay * spec.sigma * mult[1],
                spec.half[2] * shape.az * spec.sigma * mult[2],
            ]
        };
        let mut half = axes(&mult);
        if !ellipsoid_inside_body(&shape, center, half) {
            for m in &mut mult {
                *m = jitter_dist
                    .sample(&mut jitter_rng)
                    .clamp(1.0 - JITTER_SIGMA, 1.0 + JITTER_SIGMA);
            }
            half = axes(&mult);
            jitter_clamped.push(spec.label);
        }
        claim_ellipsoid(&body.vol, &mut label_of, &core, spec.label, center, half);
    }

    // A posterior bone column spanning most of the body height.
    let spine_radius = 0.11 * shape.ax.min(shape.ay) * (0.95 + 0.10 * demographics.normalized().0);
    claim_cylinder(&body.vol, &mut label_of, &core, spine_radius, 0.50 * shape.ay, 0.85, &shape);

    // Whatever core remains is background musculature.
    for idx in 0..n {
        if core[idx] && label_of[idx].is_none() {
            label_of[idx] = Some(OrganLabel::Muscle);
        }
    }

    // Density: one base value per tissue per record, plus per-voxel texture,
    // all confined to the tissue band.
    let mut density = Volume3::zeros(grid.nx, grid.ny, grid.nz, grid.spacing_mm, origin, PayloadKind::DensityHu);
    density.data.fill(AIR_HU);
    let mut density_rng = rng::stream(seed, "phantom/density");
    for label in OrganLabel::ALL {
        let (lo, hi) = label.hu_band();
        let width = (hi - lo) as f64;
        let base = lo as f64 + width * density_rng.gen_range(0.15..0.85);
        for idx in 0..n {
            if label_of[idx] == Some(label) {
                let noise = density_rng.gen_range(-0.08..0.08) * width;
                density.data[idx] = ((base + noise).clamp(lo as f64, hi as f64)) as f32;
            }
        }
    }

    let mut organ_masks = BTreeMap::new();
    for label in OrganLabel::ALL {
        let mut mask = OccupancyMask::empty(grid.nx, grid.ny, grid.nz, grid.spacing_mm, origin);
        for idx in 0..n {
            if label_of[idx] == Some(label) {
                mask.vol.data[idx] = 1.0;
            }
        }
        organ_masks.insert(label, mask);
    }

    Ok(PhantomRecord {
        id: format!("p-{seed:016x}"),
        seed,
        demographics,
        density,
        body,
        organ_masks,
        sdf_full,
        sdf_partial,
        jitter_clamped,
    })
}

/// Conservative containment test sampling the ellipsoid's principal axis
/// endpoints and a few diagonal surface points.
fn ellipsoid_inside_body(shape: &BodyShape, c: [f64; 3], h: [f64; 3]) -> bool {
    let mut probes: Vec<[f64; 3]> = Vec::with_capacity(14);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut p = c;
            p[axis] += sign * h[axis];
            probes.push(p);
        }
    }
    let d = 1.0 / (3.0f64).sqrt();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                probes.push([c[0] + sx * d * h[0], c[1] + sy * d * h[1], c[2] + sz * d * h[2]]);
            }
        }
    }
    probes.into_iter().all(|p| shape.contains(p))
}

fn claim_ellipsoid(
    vol: &Volume3,
    label_of: &mut [Option<OrganLabel>],
    core: &[bool],
    label: OrganLabel,
    c: [f64; 3],
    h: [f64; 3],
) {
    for k in 0..vol.nz {
        for j in 0..vol.ny {
            for i in 0..vol.nx {
                let idx = vol.index(i, j, k);
                if !core[idx] || label_of[idx].is_some() {
                    continue;
                }
                let p = vol.voxel_center(i, j, k);
                let u = (p[0] - c[0]) / h[0];
                let v = (p[1] - c[1]) / h[1];
                let w = (p[2] - c[2]) / h[2];
                if u * u + v * v + w * w <= 1.0 {
                    label_of[idx] = Some(label);
                }
            }
        }
    }
}

/// Claims a vertical cylinder (the spine analog) for bone.
fn claim_cylinder(
    vol: &Volume3,
    label_of: &mut [Option<OrganLabel>],
    core: &[bool],
    radius: f64,
    y_center: f64,
    zeta_max: f64,
    shape: &BodyShape,
) {
    for k in 0..vol.nz {
        for j in 0..vol.ny {
            for i in 0..vol.nx {
                let idx = vol.index(i, j, k);
                if !core[idx] || label_of[idx].is_some() {
                    continue;
                }
                let p = vol.voxel_center(i, j, k);
                if (p[2] / shape.az).abs() > zeta_max {
                    continue;
                }
                let dx = p[0];
                let dy = p[1] - y_center;
                if dx * dx + dy * dy <= radius * radius {
                    label_of[idx] = Some(OrganLabel::Bone);
                }
            }
        }
    }
}
