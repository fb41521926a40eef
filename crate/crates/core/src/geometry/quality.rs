//! Surface agreement metrics: Chamfer distance, occupancy IoU, normalized
//! mean absolute SDF error.
//!
//! Chamfer nearest-neighbor queries run through a uniform spatial hash with
//! a ring search whose pruning bound is conservative, so the result is the
//! same f64 value a brute-force scan produces: the minimum over an
//! identical candidate set, visited in a different order.

use super::{GeometryError, OccupancyMask, Result, SdfGrid};

/// Symmetric Chamfer distance in mm:
/// `(mean_a min_b |a-b| + mean_b min_a |a-b|) / 2`.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    let hash_b = SpatialHash::build(b);
    let hash_a = SpatialHash::build(a);
    let mut sum_a = 0.0;
    for p in a {
        sum_a += hash_b.nearest_sq(p).sqrt();
    }
    let mut sum_b = 0.0;
    for p in b {
        sum_b += hash_a.nearest_sq(p).sqrt();
    }
    Ok(0.5 * (sum_a / a.len() as f64 + sum_b / b.len() as f64))
}

/// Intersection over union of two aligned masks; 1.0 when both are empty.
pub fn iou(a: &OccupancyMask, b: &OccupancyMask) -> Result<f64> {
    a.vol.check_aligned(&b.vol)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for idx in 0..a.vol.numel() {
        let (sa, sb) = (a.is_set_idx(idx), b.is_set_idx(idx));
        inter += (sa && sb) as usize;
        union += (sa || sb) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Mean absolute SDF difference normalized by the reference dynamic range
/// `2 * tau`.
pub fn nmae(a: &SdfGrid, b_reference: &SdfGrid) -> Result<f64> {
    a.vol.check_aligned(&b_reference.vol)?;
    let mut sum = 0.0f64;
    for (x, y) in a.vol.data.iter().zip(&b_reference.vol.data) {
        sum += (*x as f64 - *y as f64).abs();
    }
    Ok(sum / a.vol.numel() as f64 / (2.0 * b_reference.tau as f64))
}

struct SpatialHash<'a> {
    pts: &'a [[f64; 3]],
    min: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// Point indices per cell, cells in z-major order.
    buckets: Vec<Vec<u32>>,
}

impl<'a> SpatialHash<'a> {
    fn build(pts: &'a [[f64; 3]]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in pts {
            for ax in 0..3 {
                min[ax] = min[ax].min(p[ax]);
                max[ax] = max[ax].max(p[ax]);
            }
        }
        let extents = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        // aim for about one point per cell; degenerate boxes fall back to a
        // single bucket, which degrades to the brute-force scan
        let volume = extents.iter().map(|e| e.max(1e-9)).product::<f64>();
        let mut cell = (volume / pts.len() as f64).cbrt();
        if !cell.is_finite() || cell <= 0.0 {
            cell = 1.0;
        }
        let dims = [0, 1, 2].map(|ax| {
            let d = (extents[ax] / cell).floor() as usize + 1;
            d.clamp(1, 128)
        });
        let mut hash = SpatialHash { pts, min, cell, dims, buckets: vec![Vec::new(); dims[0] * dims[1] * dims[2]] };
        for (i, p) in pts.iter().enumerate() {
            let c = hash.cell_of(p);
            let idx = hash.bucket_index(c);
            hash.buckets[idx].push(i as u32);
        }
        hash
    }

    fn cell_of(&self, p: &[f64; 3]) -> [usize; 3] {
        [0, 1, 2].map(|ax| {
            let c = ((p[ax] - self.min[ax]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[ax] - 1)
        })
    }

    fn bucket_index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Exact squared distance to the nearest stored point.
    fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let c = self.cell_of(q);
        let max_ring = (0..3)
            .map(|ax| c[ax].max(self.dims[ax] - 1 - c[ax]))
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            if best.is_finite() {
                // any point in ring r is at least (r-1) cell widths away
                let lb = (r.saturating_sub(1)) as f64 * self.cell;
                if lb * lb > best {
                    break;
                }
            }
            self.scan_ring(c, r, q, &mut best);
        }
        best
    }

    fn scan_ring(&self, c: [usize; 3], r: usize, q: &[f64; 3], best: &mut f64) {
        let ri = r as isize;
        for dz in -ri..=ri {
            let z = c[2] as isize + dz;
            if z < 0 || z as usize >= self.dims[2] {
                continue;
            }
            for dy in -ri..=ri {
                let y = c[1] as isize + dy;
                if y < 0 || y as usize >= self.dims[1] {
                    continue;
                }
                for dx in -ri..=ri {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ri {
                        continue;
                    }
                    let x = c[0] as isize + dx;
                    if x < 0 || x as usize >= self.dims[0] {
                        continue;
                    }
                    let bucket =
                        &self.buckets[self.bucket_index([x as usize, y as usize, z as usize])];
                    for &pi in bucket {
                        let p = &self.pts[pi as usize];
                        let d2 = (q[0] - p[0]) * (q[0] - p[0])
                            + (q[1] - p[1]) * (q[1] - p[1])
                            + (q[2] - p[2]) * (q[2] - p[2]);
                        if d2 < *best {
                            *best = d2;
                        }
                    }
                }
            }
        }
    }
}
