//! Spatial plumbing for the super-resolution stage: trilinear upsampling,
//! sinusoidal positional channels, and overlapping patch layouts blended
//! with raised-cosine windows.

use crate::geometry::Volume3;

use super::{CascadeError, Result};

/// Cell-center (align-corners-false) trilinear upsampling. The output keeps
/// the physical origin and extents: spacing is divided by `factor` and every
/// axis extent is multiplied by it.
pub fn upsample_trilinear(coarse: &Volume3, factor: usize) -> Volume3 {
    assert!(factor >= 1, "factor must be at least 1");
    if factor == 1 {
        return coarse.clone();
    }
    let (nx, ny, nz) = (coarse.nx * factor, coarse.ny * factor, coarse.nz * factor);
    let mut out = Volume3::zeros(
        nx,
        ny,
        nz,
        coarse.spacing / factor as f32,
        coarse.origin,
        coarse.kind,
    );
    let inv = 1.0 / factor as f64;
    // index and interpolation weight into the coarse axis for a fine index
    let prep = |n_coarse: usize, i_fine: usize| -> (usize, usize, f64) {
        let u = ((i_fine as f64 + 0.5) * inv - 0.5).clamp(0.0, (n_coarse - 1) as f64);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(n_coarse - 1);
        (lo, hi, u - lo as f64)
    };
    let xw: Vec<_> = (0..nx).map(|i| prep(coarse.nx, i)).collect();
    let yw: Vec<_> = (0..ny).map(|j| prep(coarse.ny, j)).collect();
    let zw: Vec<_> = (0..nz).map(|k| prep(coarse.nz, k)).collect();
    for k in 0..nz {
        let (k0, k1, fz) = zw[k];
        for j in 0..ny {
            let (j0, j1, fy) = yw[j];
            for i in 0..nx {
                let (i0, i1, fx) = xw[i];
                let mut acc = 0.0f64;
                for (kc, wz) in [(k0, 1.0 - fz), (k1, fz)] {
                    if wz == 0.0 {
                        continue;
                    }
                    for (jc, wy) in [(j0, 1.0 - fy), (j1, fy)] {
                        if wy == 0.0 {
                            continue;
                        }
                        for (ic, wx) in [(i0, 1.0 - fx), (i1, fx)] {
                            if wx == 0.0 {
                                continue;
                            }
                            acc += wz * wy * wx * coarse.at(ic, jc, kc) as f64;
                        }
                    }
                }
                out.set(i, j, k, acc as f32);
            }
        }
    }
    out
}

/// Number of positional channels: 3 axes x 2 frequencies x (sin, cos).
pub const POS_CHANNELS: usize = 12;

/// Sin/cos features of one normalized coordinate triple, ordered axis-major
/// (x, y, z), within each axis by frequency k = 0 then 1, sin before cos.
pub fn positional_features(c: [f64; 3]) -> [f64; POS_CHANNELS] {
    let mut out = [0.0; POS_CHANNELS];
    let mut w = 0;
    for &coord in &c {
        for k in 0..2u32 {
            let arg = std::f64::consts::TAU * (1 << k) as f64 * coord;
            out[w] = arg.sin();
            out[w + 1] = arg.cos();
            w += 2;
        }
    }
    out
}

/// Positional channels for one patch as channel-major data over the patch's
/// voxels (z-major within a channel, matching volume layout). Coordinates
/// are voxel centers normalized by the full grid: `(g + 0.5) / n`.
///
/// `origin`, `patch`, and `grid` are in (x, y, z) index order.
pub fn positional_values(origin: [usize; 3], patch: [usize; 3], grid: [usize; 3]) -> Vec<f32> {
    let n = patch[0] * patch[1] * patch[2];
    let mut out = vec![0.0f32; POS_CHANNELS * n];
    let mut idx = 0;
    for k in 0..patch[2] {
        for j in 0..patch[1] {
            for i in 0..patch[0] {
                let c = [
                    (origin[0] + i) as f64 + 0.5,
                    (origin[1] + j) as f64 + 0.5,
                    (origin[2] + k) as f64 + 0.5,
                ];
                let c = [c[0] / grid[0] as f64, c[1] / grid[1] as f64, c[2] / grid[2] as f64];
                let f = positional_features(c);
                for (ch, &v) in f.iter().enumerate() {
                    out[ch * n + idx] = v as f32;
                }
                idx += 1;
            }
        }
    }
    out
}

/// Overlapping patch tiling of a grid, with raised-cosine blend windows.
/// Edge patches are shifted inward so every patch lies fully inside the
/// grid; no zero padding occurs anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    /// Grid extents in (x, y, z) index order.
    pub grid: [usize; 3],
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    /// Canonical z-major order; blending always walks this order, so the
    /// result is independent of the order patches were produced in.
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(n: usize, p: usize, s: usize) -> Vec<usize> {
    let mut out = vec![0usize];
    loop {
        let last = *out.last().unwrap();
        if last + p >= n {
            break;
        }
        out.push((last + s).min(n - p));
    }
    out
}

impl PatchLayout {
    pub fn new(grid: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if patch[a] == 0 || patch[a] > grid[a] {
                return Err(CascadeError::Layout(format!(
                    "patch extent {} exceeds grid extent {} on axis {a}",
                    patch[a], grid[a]
                )));
            }
            if stride[a] == 0 || stride[a] > patch[a] {
                return Err(CascadeError::Layout(format!(
                    "stride {} must be in [1, patch extent {}] on axis {a}",
                    stride[a], patch[a]
                )));
            }
        }
        let xs = axis_origins(grid[0], patch[0], stride[0]);
        let ys = axis_origins(grid[1], patch[1], stride[1]);
        let zs = axis_origins(grid[2], patch[2], stride[2]);
        let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    origins.push([x, y, z]);
                }
            }
        }
        Ok(PatchLayout { grid, patch, stride, origins })
    }

    /// Half-stride overlap with the patch sized like the coarse grid: the
    /// default layout for the x2 super-resolution stage.
    pub fn default_overlapping(grid: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        let stride = [
            (patch[0] / 2).max(1),
            (patch[1] / 2).max(1),
            (patch[2] / 2).max(1),
        ];
        Self::new(grid, patch, stride)
    }

    pub fn numel_patch(&self) -> usize {
        self.patch[0] * self.patch[1] * self.patch[2]
    }

    /// Separable raised-cosine window along one axis; strictly positive at
    /// every in-patch position thanks to the half-voxel offset.
    fn axis_window(p: usize) -> Vec<f64> {
        (0..p)
            .map(|i| {
                let s = (std::f64::consts::PI * (i as f64 + 0.5) / p as f64).sin();
                s * s
            })
            .collect()
    }

    /// Blends per-patch voxel data into the full grid. `patches` must hold
    /// exactly the layout's origins (any order), each with `numel_patch()`
    /// values in z-major patch layout. Output voxels are weight-normalized,
    /// so blend weights sum to one at every voxel by construction; coverage
    /// is asserted.
    pub fn blend(&self, patches: &[([usize; 3], Vec<f32>)]) -> Result<Vec<f32>> {
        let mut by_origin: std::collections::HashMap<[usize; 3], &[f32]> =
            std::collections::HashMap::with_capacity(patches.len());
        for (origin, data) in patches {
            if data.len() != self.numel_patch() {
                return Err(CascadeError::Layout(format!(
                    "patch at {origin:?} has {} values, layout expects {}",
                    data.len(),
                    self.numel_patch()
                )));
            }
            if by_origin.insert(*origin, data).is_some() {
                return Err(CascadeError::Layout(format!("duplicate patch origin {origin:?}")));
            }
        }
        if by_origin.len() != self.origins.len() {
            return Err(CascadeError::Layout(format!(
                "got {} patches, layout has {}",
                by_origin.len(),
                self.origins.len()
            )));
        }

        let n = self.grid[0] * self.grid[1] * self.grid[2];
        let mut acc = vec![0.0f64; n];
        let mut wsum = vec![0.0f64; n];
        let wx = Self::axis_window(self.patch[0]);
        let wy = Self::axis_window(self.patch[1]);
        let wz = Self::axis_window(self.patch[2]);
        for origin in &self.origins {
            let data = by_origin
                .remove(origin)
                .ok_or_else(|| CascadeError::Layout(format!("missing patch origin {origin:?}")))?;
            let mut p = 0usize;
            for k in 0..self.patch[2] {
                let gz = origin[2] + k;
                for j in 0..self.patch[1] {
                    let gy = origin[1] + j;
                    let row_w = wz[k] * wy[j];
                    let base = (gz * self.grid[1] + gy) * self.grid[0] + origin[0];
                    for i in 0..self.patch[0] {
                        let w = row_w * wx[i];
                        acc[base + i] += w * data[p] as f64;
                        wsum[base + i] += w;
                        p += 1;
                    }
                }
            }
        }
        let mut out = vec![0.0f32; n];
        for i in 0..n {
            assert!(wsum[i] > 1e-9, "voxel {i} not covered by any patch");
            out[i] = (acc[i] / wsum[i]) as f32;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PayloadKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(nx: usize, ny: usize, nz: usize, f: impl Fn(usize, usize, usize) -> f32) -> Volume3 {
        let mut v = Volume3::zeros(nx, ny, nz, 2.0, [0.0; 3], PayloadKind::DensityHu);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    v.set(i, j, k, f(i, j, k));
                }
            }
        }
        v
    }

    #[test]
    fn upsample_constant_and_identity() {
        let v = vol(3, 3, 3, |_, _, _| 4.25);
        let u = upsample_trilinear(&v, 2);
        assert_eq!((u.nx, u.ny, u.nz), (6, 6, 6));
        assert_eq!(u.spacing, 1.0);
        assert!(u.data.iter().all(|&x| x == 4.25));
        assert_eq!(upsample_trilinear(&v, 1), v);
    }

    #[test]
    fn upsample_reproduces_linear_ramp_interior() {
        // f = 3x + 2 in coarse index units; interior fine samples must match
        let v = vol(6, 4, 4, |i, _, _| 3.0 * i as f32 + 2.0);
        let u = upsample_trilinear(&v, 2);
        for k in 0..8 {
            for j in 0..8 {
                for i in 1..11 {
                    // fine coordinate in coarse units
                    let x = (i as f64 + 0.5) / 2.0 - 0.5;
                    let expect = 3.0 * x + 2.0;
                    assert!(
                        (u.at(i, j, k) as f64 - expect).abs() < 1e-5,
                        "({i},{j},{k}): {} vs {expect}",
                        u.at(i, j, k)
                    );
                }
            }
        }
    }

    #[test]
    fn upsample_then_block_mean_recovers_fields_interior() {
        // Affine fields round-trip exactly away from the clamped borders;
        // smooth curved fields agree to the quadratic Taylor remainder.
        let affine = vol(8, 8, 8, |i, j, k| {
            2.0 * i as f32 - 1.5 * j as f32 + 0.5 * k as f32 + 3.0
        });
        let curved = vol(8, 8, 8, |i, j, k| {
            ((i as f32) * 0.3).cos() + 0.1 * j as f32 - 0.05 * k as f32
        });
        // curved remainder: 0.125 h^2 |f''| with |f''| <= 0.09 here
        for (v, tol) in [(&affine, 1e-5f32), (&curved, 0.02)] {
            let u = upsample_trilinear(v, 2);
            let d = crate::phantom::downsample(&u, 2).unwrap();
            for k in 1..7 {
                for j in 1..7 {
                    for i in 1..7 {
                        let idx = v.index(i, j, k);
                        assert!(
                            (d.data[idx] - v.data[idx]).abs() < tol,
                            "({i},{j},{k}): {} vs {}",
                            d.data[idx],
                            v.data[idx]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn positional_features_at_zero_and_range() {
        let f = positional_features([0.0, 0.0, 0.0]);
        for a in 0..3 {
            assert_eq!(f[4 * a], 0.0); // sin k=0
            assert_eq!(f[4 * a + 1], 1.0); // cos k=0
            assert_eq!(f[4 * a + 2], 0.0); // sin k=1
            assert_eq!(f[4 * a + 3], 1.0); // cos k=1
        }
        let g = positional_features([0.37, 0.91, 0.13]);
        assert!(g.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_values_match_direct_formula() {
        let origin = [4, 2, 8];
        let patch = [4, 4, 6];
        let grid = [32, 32, 48];
        let vals = positional_values(origin, patch, grid);
        let n = 4 * 4 * 6;
        assert_eq!(vals.len(), 12 * n);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (i, j, k) =
                (r.gen_range(0..patch[0]), r.gen_range(0..patch[1]), r.gen_range(0..patch[2]));
            let idx = (k * patch[1] + j) * patch[0] + i;
            for axis in 0..3 {
                let g = [origin[0] + i, origin[1] + j, origin[2] + k][axis];
                let c = (g as f64 + 0.5) / grid[axis] as f64;
                for kk in 0..2 {
                    let arg = std::f64::consts::TAU * (1 << kk) as f64 * c;
                    let ch = 4 * axis + 2 * kk;
                    assert!((vals[ch * n + idx] as f64 - arg.sin()).abs() < 1e-7);
                    assert!((vals[(ch + 1) * n + idx] as f64 - arg.cos()).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn distinct_origins_give_distinct_first_voxel_features() {
        let grid = [32, 32, 48];
        let a = positional_values([0, 0, 0], [4, 4, 4], grid);
        let b = positional_values([8, 0, 0], [4, 4, 4], grid);
        assert_ne!(a[..4 * 4 * 4 * 12], b[..4 * 4 * 4 * 12]);
    }

    #[test]
    fn layout_origins_cover_and_stay_inside() {
        let l = PatchLayout::new([11, 10, 8], [4, 4, 4], [3, 3, 2]).unwrap();
        assert!(l.origins.iter().all(|o| {
            o[0] + 4 <= 11 && o[1] + 4 <= 10 && o[2] + 4 <= 8
        }));
        // inward shift on the odd axis: origins 0,3,6,7
        let xs: std::collections::BTreeSet<usize> = l.origins.iter().map(|o| o[0]).collect();
        assert_eq!(xs.into_iter().collect::<Vec<_>>(), vec![0, 3, 6, 7]);
        let mut covered = vec![false; 11 * 10 * 8];
        for o in &l.origins {
            for k in 0..4 {
                for j in 0..4 {
                    for i in 0..4 {
                        covered[((o[2] + k) * 10 + o[1] + j) * 11 + o[0] + i] = true;
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn layout_validation() {
        assert!(PatchLayout::new([8, 8, 8], [9, 4, 4], [2, 2, 2]).is_err());
        assert!(PatchLayout::new([8, 8, 8], [4, 4, 4], [5, 2, 2]).is_err());
        assert!(PatchLayout::new([8, 8, 8], [4, 4, 4], [0, 2, 2]).is_err());
    }

    #[test]
    fn blending_ones_yields_ones() {
        let l = PatchLayout::default_overlapping([16, 16, 24], [8, 8, 12]).unwrap();
        let patches: Vec<_> =
            l.origins.iter().map(|&o| (o, vec![1.0f32; l.numel_patch()])).collect();
        let out = l.blend(&patches).unwrap();
        for (i, v) in out.iter().enumerate() {
            assert!((v - 1.0).abs() < 1e-6, "voxel {i}: {v}");
        }
    }

    #[test]
    fn non_overlapping_blend_is_exact_concatenation() {
        let l = PatchLayout::new([8, 8, 8], [4, 4, 4], [4, 4, 4]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let patches: Vec<_> = l
            .origins
            .iter()
            .map(|&o| (o, (0..64).map(|_| r.gen::<f32>()).collect::<Vec<f32>>()))
            .collect();
        let out = l.blend(&patches).unwrap();
        for (o, data) in &patches {
            let mut p = 0;
            for k in 0..4 {
                for j in 0..4 {
                    for i in 0..4 {
                        let g = ((o[2] + k) * 8 + o[1] + j) * 8 + o[0] + i;
                        assert_eq!(out[g].to_bits(), data[p].to_bits());
                        p += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn blend_is_invariant_to_patch_order() {
        let l = PatchLayout::default_overlapping([12, 12, 12], [6, 6, 6]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut patches: Vec<_> = l
            .origins
            .iter()
            .map(|&o| (o, (0..l.numel_patch()).map(|_| r.gen::<f32>()).collect::<Vec<f32>>()))
            .collect();
        let sorted = l.blend(&patches).unwrap();
        patches.reverse();
        patches.swap(0, 3);
        let shuffled = l.blend(&patches).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&sorted), bits(&shuffled));
    }

    #[test]
    fn blend_rejects_wrong_patch_sets() {
        let l = PatchLayout::new([8, 8, 8], [4, 4, 4], [4, 4, 4]).unwrap();
        let mut patches: Vec<_> =
            l.origins.iter().map(|&o| (o, vec![0.0f32; 64])).collect();
        let dropped = patches.pop().unwrap();
        assert!(l.blend(&patches).is_err());
        patches.push((dropped.0, vec![0.0f32; 10]));
        assert!(l.blend(&patches).is_err());
    }
}
