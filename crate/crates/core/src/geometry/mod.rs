//! Voxel grids, truncated signed distance fields, and surface-quality
//! metrics.
//!
//! Everything downstream lives on [`Volume3`]: a z-major scalar grid with
//! isotropic spacing, where voxel `(i, j, k)` is centered at
//! `origin + spacing * (i + 1/2, j + 1/2, k + 1/2)` mm. [`SdfGrid`] wraps a
//! volume of truncated signed distances (positive inside the body),
//! [`OccupancyMask`] a 0/1 volume. The `.vol3` on-disk format is defined
//! here; its byte layout is stable and versioned.

mod quality;
mod sdf;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub use quality::{chamfer, iou, nmae};
pub use sdf::{compute_sdf, extract_surface_points, make_partial};

pub const VOL3_MAGIC: &[u8; 4] = b"VOL3";
pub const VOL3_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed volume file: {0}")]
    Format(String),
    #[error("grids are not aligned: {lhs} vs {rhs}")]
    GridMismatch { lhs: String, rhs: String },
    #[error("degenerate mask: {0}")]
    DegenerateMask(&'static str),
    #[error("surface set is empty: {0}")]
    EmptySurface(&'static str),
    #[error("point set is empty")]
    EmptyPointSet,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// What the scalar payload of a volume means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    /// Density in Hounsfield-like units.
    DensityHu = 0,
    /// Density mapped to [0, 1].
    DensityNorm = 1,
    /// Truncated signed distance in mm.
    SdfMm = 2,
    /// Truncated signed distance rescaled to [-1, 1].
    SdfNorm = 3,
    /// Occupancy in {0, 1}.
    Mask = 4,
}

impl PayloadKind {
    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(PayloadKind::DensityHu),
            1 => Some(PayloadKind::DensityNorm),
            2 => Some(PayloadKind::SdfMm),
            3 => Some(PayloadKind::SdfNorm),
            4 => Some(PayloadKind::Mask),
            _ => None,
        }
    }
}

/// A scalar field on a regular grid. Layout is z-major: index
/// `(k * ny + j) * nx + i`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Isotropic voxel edge length in mm.
    pub spacing: f32,
    /// World position of the grid corner (not the first voxel center), mm.
    pub origin: [f32; 3],
    pub kind: PayloadKind,
    pub data: Vec<f32>,
}

impl Volume3 {
    pub fn zeros(nx: usize, ny: usize, nz: usize, spacing: f32, origin: [f32; 3], kind: PayloadKind) -> Self {
        assert!(nx >= 1 && ny >= 1 && nz >= 1, "extents must be at least 1");
        assert!(spacing > 0.0, "spacing must be positive");
        Volume3 { nx, ny, nz, spacing, origin, kind, data: vec![0.0; nx * ny * nz] }
    }

    pub fn numel(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        (k * self.ny + j) * self.nx + i
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// World coordinates of the voxel center, mm.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] as f64 + self.spacing as f64 * (i as f64 + 0.5),
            self.origin[1] as f64 + self.spacing as f64 * (j as f64 + 0.5),
            self.origin[2] as f64 + self.spacing as f64 * (k as f64 + 0.5),
        ]
    }

    /// Physical edge lengths (mm) along x, y, z.
    pub fn physical_extents(&self) -> [f32; 3] {
        [
            self.nx as f32 * self.spacing,
            self.ny as f32 * self.spacing,
            self.nz as f32 * self.spacing,
        ]
    }

    pub fn grid_summary(&self) -> String {
        format!(
            "{}x{}x{} @ {} mm, origin ({}, {}, {})",
            self.nx, self.ny, self.nz, self.spacing, self.origin[0], self.origin[1], self.origin[2]
        )
    }

    /// Errors unless `other` shares extents, spacing, and origin.
    pub fn check_aligned(&self, other: &Volume3) -> Result<()> {
        let same = self.nx == other.nx
            && self.ny == other.ny
            && self.nz == other.nz
            && self.spacing == other.spacing
            && self.origin == other.origin;
        if same {
            Ok(())
        } else {
            Err(GeometryError::GridMismatch {
                lhs: self.grid_summary(),
                rhs: other.grid_summary(),
            })
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(VOL3_MAGIC)?;
        w.write_all(&VOL3_VERSION.to_le_bytes())?;
        for e in [self.nx, self.ny, self.nz] {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        w.write_all(&self.spacing.to_le_bytes())?;
        for o in self.origin {
            w.write_all(&o.to_le_bytes())?;
        }
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| GeometryError::Format("file shorter than the magic bytes".into()))?;
        if &magic != VOL3_MAGIC {
            return Err(GeometryError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VOL3_VERSION {
            return Err(GeometryError::Format(format!(
                "unsupported version {version} (expected {VOL3_VERSION})"
            )));
        }
        let nx = read_u32(&mut r)? as usize;
        let ny = read_u32(&mut r)? as usize;
        let nz = read_u32(&mut r)? as usize;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(GeometryError::Format("zero extent".into()));
        }
        let spacing = read_f32(&mut r)?;
        if !(spacing > 0.0) {
            return Err(GeometryError::Format(format!("non-positive spacing {spacing}")));
        }
        let origin = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
        let tag = read_u32(&mut r)?;
        let kind = PayloadKind::from_tag(tag)
            .ok_or_else(|| GeometryError::Format(format!("unknown payload kind {tag}")))?;
        let numel = nx * ny * nz;
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|_| GeometryError::Format("truncated payload".into()))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(GeometryError::Format("trailing bytes after payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Volume3 { nx, ny, nz, spacing, origin, kind, data })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| GeometryError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r)?))
}

/// 0/1 volume marking body membership.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMask {
    pub vol: Volume3,
}

impl OccupancyMask {
    pub fn empty(nx: usize, ny: usize, nz: usize, spacing: f32, origin: [f32; 3]) -> Self {
        OccupancyMask { vol: Volume3::zeros(nx, ny, nz, spacing, origin, PayloadKind::Mask) }
    }

    /// Thresholds an SDF: the zero level sits on the surface shell, which is
    /// occupied by construction, so the test is `>= 0`.
    pub fn from_sdf(sdf: &SdfGrid) -> Self {
        let mut vol = sdf.vol.clone();
        vol.kind = PayloadKind::Mask;
        for v in &mut vol.data {
            *v = if *v >= 0.0 { 1.0 } else { 0.0 };
        }
        OccupancyMask { vol }
    }

    #[inline]
    pub fn is_set_idx(&self, idx: usize) -> bool {
        self.vol.data[idx] > 0.5
    }

    #[inline]
    pub fn is_set(&self, i: usize, j: usize, k: usize) -> bool {
        self.vol.data[self.vol.index(i, j, k)] > 0.5
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, occupied: bool) {
        let idx = self.vol.index(i, j, k);
        self.vol.data[idx] = if occupied { 1.0 } else { 0.0 };
    }

    pub fn count(&self) -> usize {
        self.vol.data.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Truncated signed distances in mm; positive inside the body.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub vol: Volume3,
    /// Truncation radius in mm; every value lies in [-tau, tau].
    pub tau: f32,
}

impl SdfGrid {
    /// Default truncation radius: a quarter of the smallest physical extent.
    /// This makes tau recoverable from any volume header, so files need not
    /// carry it separately.
    pub fn default_tau(vol: &Volume3) -> f32 {
        let e = vol.physical_extents();
        0.25 * e[0].min(e[1]).min(e[2])
    }

    /// Wraps a distance volume read from disk, recomputing tau from the grid.
    pub fn attach(vol: Volume3) -> Self {
        let tau = Self::default_tau(&vol);
        SdfGrid { vol, tau }
    }

    /// Rescales to [-1, 1] for network consumption.
    pub fn normalized(&self) -> Volume3 {
        let mut out = self.vol.clone();
        out.kind = PayloadKind::SdfNorm;
        let inv = 1.0 / self.tau;
        for v in &mut out.data {
            *v *= inv;
        }
        out
    }

    /// Inverse of [`SdfGrid::normalized`].
    pub fn from_normalized(vol: &Volume3, tau: f32) -> Self {
        let mut out = vol.clone();
        out.kind = PayloadKind::SdfMm;
        for v in &mut out.data {
            *v *= tau;
        }
        SdfGrid { vol: out, tau }
    }

    pub fn occupancy(&self) -> OccupancyMask {
        OccupancyMask::from_sdf(self)
    }
}

/// Clamps to [-500, 500] HU and maps linearly onto [0, 1].
pub fn normalize_hu(v: &Volume3) -> Volume3 {
    let mut out = v.clone();
    out.kind = PayloadKind::DensityNorm;
    for x in &mut out.data {
        *x = (((*x as f64).clamp(-500.0, 500.0) + 500.0) / 1000.0) as f32;
    }
    out
}

/// Exact inverse of [`normalize_hu`] on [0, 1].
pub fn denormalize_hu(v: &Volume3) -> Volume3 {
    let mut out = v.clone();
    out.kind = PayloadKind::DensityHu;
    for x in &mut out.data {
        *x = (*x as f64 * 1000.0 - 500.0) as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn indexing_is_z_major() {
        let v = Volume3::zeros(3, 4, 5, 1.0, [0.0; 3], PayloadKind::Mask);
        assert_eq!(v.index(0, 0, 0), 0);
        assert_eq!(v.index(1, 0, 0), 1);
        assert_eq!(v.index(0, 1, 0), 3);
        assert_eq!(v.index(0, 0, 1), 12);
        assert_eq!(v.index(2, 3, 4), 59);
    }

    #[test]
    fn voxel_centers_are_half_offset() {
        let v = Volume3::zeros(2, 2, 2, 4.0, [-4.0, 0.0, 8.0], PayloadKind::Mask);
        assert_eq!(v.voxel_center(0, 0, 0), [-2.0, 2.0, 10.0]);
        assert_eq!(v.voxel_center(1, 1, 1), [2.0, 6.0, 14.0]);
    }

    #[test]
    fn vol3_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = crate::rng::stream(9, "test/vol3");
        let mut v = Volume3::zeros(4, 3, 2, 2.5, [1.0, -2.0, 0.5], PayloadKind::SdfMm);
        for x in &mut v.data {
            *x = r.gen_range(-1e3f32..1e3);
        }
        v.data[0] = -0.0;
        v.data[1] = f32::MIN_POSITIVE;
        let path = dir.path().join("v.vol3");
        v.write(&path).unwrap();
        let back = Volume3::read(&path).unwrap();
        assert_eq!(v, back);
        assert_eq!(
            v.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            back.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn vol3_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3::zeros(2, 2, 2, 1.0, [0.0; 3], PayloadKind::Mask);
        let path = dir.path().join("v.vol3");
        v.write(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Volume3::read(&path), Err(GeometryError::Format(_))));

        let mut bad = good.clone();
        bad[4] = 9; // version
        std::fs::write(&path, &bad).unwrap();
        assert!(Volume3::read(&path).is_err());

        let mut bad = good.clone();
        bad[36] = 99; // payload kind tag
        std::fs::write(&path, &bad).unwrap();
        assert!(Volume3::read(&path).is_err());

        std::fs::write(&path, &good[..good.len() - 2]).unwrap();
        assert!(Volume3::read(&path).is_err());

        let mut bad = good;
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(Volume3::read(&path).is_err());
    }

    #[test]
    fn hu_normalization_fixed_points() {
        let mut v = Volume3::zeros(5, 1, 1, 1.0, [0.0; 3], PayloadKind::DensityHu);
        v.data = vec![-500.0, 500.0, 0.0, 1200.0, -1200.0];
        let n = normalize_hu(&v);
        assert_eq!(n.data, vec![0.0, 1.0, 0.5, 1.0, 0.0]);
        let back = denormalize_hu(&n);
        assert_eq!(back.data, vec![-500.0, 500.0, 0.0, 500.0, -500.0]);
    }

    #[test]
    fn hu_round_trip_from_normalized_side() {
        // storing the intermediate HU volume in f32 rounds once, so the
        // round trip is within a couple of ulp rather than bit-exact
        let mut r = crate::rng::stream(10, "test/hu");
        let mut v = Volume3::zeros(64, 1, 1, 1.0, [0.0; 3], PayloadKind::DensityNorm);
        for x in &mut v.data {
            *x = r.gen_range(0.0f32..=1.0);
        }
        let round = normalize_hu(&denormalize_hu(&v));
        for (a, b) in v.data.iter().zip(&round.data) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
        // exact at representable fixed points
        let mut fixed = Volume3::zeros(3, 1, 1, 1.0, [0.0; 3], PayloadKind::DensityNorm);
        fixed.data = vec![0.0, 0.5, 1.0];
        assert_eq!(normalize_hu(&denormalize_hu(&fixed)).data, fixed.data);
    }

    #[test]
    fn sdf_normalization_round_trip() {
        let mut vol = Volume3::zeros(4, 4, 4, 2.0, [0.0; 3], PayloadKind::SdfMm);
        let tau = SdfGrid::default_tau(&vol);
        assert_eq!(tau, 2.0); // min extent 8 mm / 4
        let mut r = crate::rng::stream(11, "test/sdfnorm");
        for x in &mut vol.data {
            *x = r.gen_range(-tau..tau);
        }
        let sdf = SdfGrid { vol, tau };
        let normed = sdf.normalized();
        assert!(normed.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = SdfGrid::from_normalized(&normed, tau);
        for (a, b) in sdf.vol.data.iter().zip(&back.vol.data) {
            assert!((a - b).abs() <= 1e-4 * tau);
        }
    }

    #[test]
    fn misaligned_grids_are_rejected() {
        let a = Volume3::zeros(2, 2, 2, 1.0, [0.0; 3], PayloadKind::Mask);
        let b = Volume3::zeros(2, 2, 3, 1.0, [0.0; 3], PayloadKind::Mask);
        let c = Volume3::zeros(2, 2, 2, 2.0, [0.0; 3], PayloadKind::Mask);
        assert!(a.check_aligned(&b).is_err());
        assert!(a.check_aligned(&c).is_err());
        assert!(a.check_aligned(&a.clone()).is_ok());
    }
}
