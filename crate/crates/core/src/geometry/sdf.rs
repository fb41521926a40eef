//! Signed distance computation on voxel grids.
//!
//! Distances are measured between voxel centers, with the surface voxel set
//! (occupied voxels with at least one in-grid unoccupied 6-neighbor) as the
//! zero level. The transform runs the separable lower-envelope algorithm on
//! squared distances in integer voxel units, so results are exact and match
//! a brute-force nearest-surface-voxel scan bit for bit.

use super::{GeometryError, OccupancyMask, PayloadKind, Result, SdfGrid};

const INF: i64 = i64::MAX / 4;

/// Marks occupied voxels that touch unoccupied space through a face.
/// Neighbors outside the grid do not count.
pub(crate) fn surface_flags(mask: &OccupancyMask) -> Vec<bool> {
    let v = &mask.vol;
    let (nx, ny, nz) = (v.nx, v.ny, v.nz);
    let mut out = vec![false; v.numel()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !mask.is_set(i, j, k) {
                    continue;
                }
                let open = (i > 0 && !mask.is_set(i - 1, j, k))
                    || (i + 1 < nx && !mask.is_set(i + 1, j, k))
                    || (j > 0 && !mask.is_set(i, j - 1, k))
                    || (j + 1 < ny && !mask.is_set(i, j + 1, k))
                    || (k > 0 && !mask.is_set(i, j, k - 1))
                    || (k + 1 < nz && !mask.is_set(i, j, k + 1));
                if open {
                    out[v.index(i, j, k)] = true;
                }
            }
        }
    }
    out
}

/// One-dimensional squared-distance transform (lower envelope of
/// parabolas). `f` holds source costs, `d` receives `min_q (p-q)^2 + f[q]`.
fn dt1d(f: &[i64], d: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sect = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64 / (2 * (q - p)) as f64
    };
    for q in 1..n {
        let mut s = sect(v[k], q);
        while k > 0 && s <= z[k] {
            k -= 1;
            s = sect(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, slot) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as i64 - v[k] as i64;
        *slot = dq * dq + f[v[k]];
    }
}

/// Exact squared distance (voxel units) from every voxel to the nearest
/// seed voxel. Seeds are the `true` entries of `seed`, z-major.
fn squared_distance_field(nx: usize, ny: usize, nz: usize, seed: &[bool]) -> Vec<i64> {
    let mut d: Vec<i64> = seed.iter().map(|&s| if s { 0 } else { INF }).collect();
    let m = nx.max(ny).max(nz);
    let mut f = vec![0i64; m];
    let mut row = vec![0i64; m];
    let mut v = vec![0usize; m];
    let mut z = vec![0f64; m + 1];
    // x sweep
    for k in 0..nz {
        for j in 0..ny {
            let base = (k * ny + j) * nx;
            f[..nx].copy_from_slice(&d[base..base + nx]);
            dt1d(&f[..nx], &mut row[..nx], &mut v, &mut z);
            d[base..base + nx].copy_from_slice(&row[..nx]);
        }
    }
    // y sweep
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                f[j] = d[(k * ny + j) * nx + i];
            }
            dt1d(&f[..ny], &mut row[..ny], &mut v, &mut z);
            for j in 0..ny {
                d[(k * ny + j) * nx + i] = row[j];
            }
        }
    }
    // z sweep
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                f[k] = d[(k * ny + j) * nx + i];
            }
            dt1d(&f[..nz], &mut row[..nz], &mut v, &mut z);
            for k in 0..nz {
                d[(k * ny + j) * nx + i] = row[k];
            }
        }
    }
    d
}

fn signed_value(d2: i64, spacing: f32, tau: f32, inside: bool) -> f32 {
    let dist = ((d2 as f64).sqrt() * spacing as f64).min(tau as f64);
    (if inside { dist } else { -dist }) as f32
}

/// Truncated signed distance to the surface voxel set of `occupancy`.
/// Positive inside, clamped to `[-tau, tau]`; surface voxels are exactly 0.
pub fn compute_sdf(occupancy: &OccupancyMask, tau: f32) -> Result<SdfGrid> {
    let vol = &occupancy.vol;
    let occupied = occupancy.count();
    if occupied == 0 {
        return Err(GeometryError::DegenerateMask("all voxels empty"));
    }
    if occupied == vol.numel() {
        return Err(GeometryError::DegenerateMask("all voxels occupied"));
    }
    assert!(tau > 0.0, "truncation radius must be positive");
    let seed = surface_flags(occupancy);
    let d2 = squared_distance_field(vol.nx, vol.ny, vol.nz, &seed);
    let mut out = vol.clone();
    out.kind = PayloadKind::SdfMm;
    for (idx, slot) in out.data.iter_mut().enumerate() {
        *slot = signed_value(d2[idx], vol.spacing, tau, occupancy.is_set_idx(idx));
    }
    Ok(SdfGrid { vol: out, tau })
}

/// Simulates a frontal-only capture: surface voxels behind the median
/// occupied y slice are dropped, the distance field is recomputed against
/// the remaining anterior surface, and every posterior voxel is declared
/// far-outside (`-tau`).
pub fn make_partial(sdf_full: &SdfGrid, occupancy: &OccupancyMask) -> Result<SdfGrid> {
    sdf_full.vol.check_aligned(&occupancy.vol)?;
    let vol = &occupancy.vol;
    let tau = sdf_full.tau;
    let median_j = median_occupied_y(occupancy)?;
    let full_surface = surface_flags(occupancy);
    let mut anterior = vec![false; vol.numel()];
    let mut any = false;
    for k in 0..vol.nz {
        for j in 0..=median_j.min(vol.ny - 1) {
            for i in 0..vol.nx {
                let idx = vol.index(i, j, k);
                if full_surface[idx] {
                    anterior[idx] = true;
                    any = true;
                }
            }
        }
    }
    if !any {
        return Err(GeometryError::EmptySurface("no surface voxels anterior of the median plane"));
    }
    let d2 = squared_distance_field(vol.nx, vol.ny, vol.nz, &anterior);
    let mut out = vol.clone();
    out.kind = PayloadKind::SdfMm;
    for k in 0..vol.nz {
        for j in 0..vol.ny {
            for i in 0..vol.nx {
                let idx = vol.index(i, j, k);
                out.data[idx] = if j > median_j {
                    -tau
                } else {
                    signed_value(d2[idx], vol.spacing, tau, occupancy.is_set_idx(idx))
                };
            }
        }
    }
    Ok(SdfGrid { vol: out, tau })
}

/// Lower median of the y indices of occupied voxels.
fn median_occupied_y(occupancy: &OccupancyMask) -> Result<usize> {
    let vol = &occupancy.vol;
    let mut counts = vec![0usize; vol.ny];
    let mut total = 0usize;
    for k in 0..vol.nz {
        for j in 0..vol.ny {
            for i in 0..vol.nx {
                if occupancy.is_set(i, j, k) {
                    counts[j] += 1;
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(GeometryError::DegenerateMask("all voxels empty"));
    }
    let target = (total - 1) / 2;
    let mut seen = 0usize;
    for (j, &c) in counts.iter().enumerate() {
        seen += c;
        if seen > target {
            return Ok(j);
        }
    }
    unreachable!("median index within counted range")
}

/// World-space centers of voxels whose sign differs from a 6-neighbor,
/// in z-major scan order. Zero counts as inside.
pub fn extract_surface_points(sdf: &SdfGrid) -> Result<Vec<[f64; 3]>> {
    let v = &sdf.vol;
    let inside = |idx: usize| v.data[idx] >= 0.0;
    let has_pos = v.data.iter().any(|&x| x >= 0.0);
    let has_neg = v.data.iter().any(|&x| x < 0.0);
    if !has_pos || !has_neg {
        return Err(GeometryError::EmptySurface("grid has a single sign"));
    }
    let mut pts = Vec::new();
    for k in 0..v.nz {
        for j in 0..v.ny {
            for i in 0..v.nx {
                let s = inside(v.index(i, j, k));
                let crossing = (i > 0 && inside(v.index(i - 1, j, k)) != s)
                    || (i + 1 < v.nx && inside(v.index(i + 1, j, k)) != s)
                    || (j > 0 && inside(v.index(i, j - 1, k)) != s)
                    || (j + 1 < v.ny && inside(v.index(i, j + 1, k)) != s)
                    || (k > 0 && inside(v.index(i, j, k - 1)) != s)
                    || (k + 1 < v.nz && inside(v.index(i, j, k + 1)) != s);
                if crossing {
                    pts.push(v.voxel_center(i, j, k));
                }
            }
        }
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Volume3;
    use rand::Rng;

    fn random_mask(seed: u64, nx: usize, ny: usize, nz: usize, p: f64) -> OccupancyMask {
        let mut r = crate::rng::stream(seed, "test/mask");
        let mut m = OccupancyMask::empty(nx, ny, nz, 1.5, [0.0; 3]);
        for v in &mut m.vol.data {
            *v = if r.gen_bool(p) { 1.0 } else { 0.0 };
        }
        m
    }

    /// O(N^2) reference: scan all surface voxels for the nearest one.
    fn brute_force_sdf(mask: &OccupancyMask, tau: f32) -> Vec<f32> {
        let v = &mask.vol;
        let flags = surface_flags(mask);
        let surf: Vec<(i64, i64, i64)> = (0..v.numel())
            .filter(|&idx| flags[idx])
            .map(|idx| {
                let i = idx % v.nx;
                let j = (idx / v.nx) % v.ny;
                let k = idx / (v.nx * v.ny);
                (i as i64, j as i64, k as i64)
            })
            .collect();
        let mut out = vec![0.0f32; v.numel()];
        for k in 0..v.nz {
            for j in 0..v.ny {
                for i in 0..v.nx {
                    let idx = v.index(i, j, k);
                    let mut best = i64::MAX;
                    for &(si, sj, sk) in &surf {
                        let d = (i as i64 - si).pow(2)
                            + (j as i64 - sj).pow(2)
                            + (k as i64 - sk).pow(2);
                        best = best.min(d);
                    }
                    out[idx] = signed_value(best, v.spacing, tau, mask.is_set_idx(idx));
                }
            }
        }
        out
    }

    fn ball_mask(n: usize, spacing: f32, radius: f64) -> OccupancyMask {
        let half = n as f32 * spacing / 2.0;
        let mut m = OccupancyMask::empty(n, n, n, spacing, [-half, -half, -half]);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let c = m.vol.voxel_center(i, j, k);
                    if (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() <= radius {
                        m.set(i, j, k, true);
                    }
                }
            }
        }
        m
    }

    #[test]
    fn ball_center_distance() {
        // 15^3 grid at 2 mm puts a voxel center exactly at the ball center
        let m = ball_mask(15, 2.0, 10.0);
        let sdf = compute_sdf(&m, 100.0).unwrap();
        let center = sdf.vol.at(7, 7, 7);
        assert!(center > 0.0);
        assert!((center - 8.0).abs() <= 2.0, "center value {center}");
        // far corner is outside
        assert!(sdf.vol.at(0, 0, 0) < 0.0);
    }

    #[test]
    fn far_field_is_exactly_minus_tau() {
        let mut m = OccupancyMask::empty(16, 16, 16, 2.0, [0.0; 3]);
        m.set(8, 8, 8, true);
        let tau = 4.0;
        let sdf = compute_sdf(&m, tau).unwrap();
        assert_eq!(sdf.vol.at(0, 0, 0), -tau);
        assert_eq!(sdf.vol.at(15, 15, 15), -tau);
        // the lone voxel is its own surface
        assert_eq!(sdf.vol.at(8, 8, 8), 0.0);
    }

    #[test]
    fn matches_brute_force_exactly() {
        let cases = [
            (1usize, 1usize, 8usize, 0.5f64),
            (3, 4, 5, 0.3),
            (7, 3, 9, 0.7),
            (12, 12, 12, 0.5),
            (12, 12, 12, 0.15),
            (12, 12, 12, 0.85),
            (2, 12, 2, 0.5),
        ];
        for (ci, &(nx, ny, nz, p)) in cases.iter().enumerate() {
            let m = random_mask(ci as u64, nx, ny, nz, p);
            let n = m.count();
            if n == 0 || n == m.vol.numel() {
                continue;
            }
            let tau = 6.0;
            let got = compute_sdf(&m, tau).unwrap();
            let want = brute_force_sdf(&m, tau);
            for idx in 0..want.len() {
                assert_eq!(
                    got.vol.data[idx].to_bits(),
                    want[idx].to_bits(),
                    "case {ci}, voxel {idx}: {} vs {}",
                    got.vol.data[idx],
                    want[idx]
                );
            }
        }
    }

    #[test]
    fn degenerate_masks_rejected() {
        let empty = OccupancyMask::empty(4, 4, 4, 1.0, [0.0; 3]);
        assert!(matches!(compute_sdf(&empty, 1.0), Err(GeometryError::DegenerateMask(_))));
        let mut full = OccupancyMask::empty(4, 4, 4, 1.0, [0.0; 3]);
        full.vol.data.fill(1.0);
        assert!(matches!(compute_sdf(&full, 1.0), Err(GeometryError::DegenerateMask(_))));
    }

    #[test]
    fn occupancy_round_trip() {
        for seed in 0..8u64 {
            let m = random_mask(100 + seed, 9, 8, 7, 0.4);
            let n = m.count();
            if n == 0 || n == m.vol.numel() {
                continue;
            }
            let sdf = compute_sdf(&m, 5.0).unwrap();
            let back = sdf.occupancy();
            assert_eq!(m.vol.data, back.vol.data, "seed {seed}");
        }
    }

    #[test]
    fn truncation_bounds_hold() {
        let m = ball_mask(11, 1.0, 3.0);
        let tau = 2.5;
        let sdf = compute_sdf(&m, tau).unwrap();
        for &v in &sdf.vol.data {
            assert!(v.abs() <= tau);
        }
    }

    #[test]
    fn partial_posterior_is_exactly_minus_tau() {
        let m = ball_mask(13, 2.0, 9.0);
        let tau = 6.0;
        let full = compute_sdf(&m, tau).unwrap();
        let partial = make_partial(&full, &m).unwrap();
        // the ball is y-symmetric, so the median occupied slice is the center
        let vol = &partial.vol;
        let mut saw_posterior = false;
        for k in 0..vol.nz {
            for j in 0..vol.ny {
                for i in 0..vol.nx {
                    if j > 6 {
                        assert_eq!(vol.at(i, j, k), -tau);
                        saw_posterior = true;
                    }
                }
            }
        }
        assert!(saw_posterior);
    }

    #[test]
    fn partial_anterior_signs_match_and_magnitudes_grow() {
        let m = ball_mask(13, 2.0, 9.0);
        let tau = 6.0;
        let full = compute_sdf(&m, tau).unwrap();
        let partial = make_partial(&full, &m).unwrap();
        let vol = &partial.vol;
        for k in 0..vol.nz {
            for j in 0..=6usize {
                for i in 0..vol.nx {
                    let p = vol.at(i, j, k);
                    let f = full.vol.at(i, j, k);
                    // fewer surface voxels can only push distances up
                    assert!(p.abs() + 1e-6 >= f.abs(), "({i},{j},{k}): {p} vs {f}");
                    if f != 0.0 && p != 0.0 {
                        assert_eq!(p > 0.0, f > 0.0, "sign flip at ({i},{j},{k})");
                    }
                }
            }
        }
    }

    #[test]
    fn make_partial_is_idempotent() {
        let m = ball_mask(13, 2.0, 9.0);
        let full = compute_sdf(&m, 6.0).unwrap();
        let once = make_partial(&full, &m).unwrap();
        let twice = make_partial(&once, &m).unwrap();
        assert_eq!(once.vol.data, twice.vol.data);
        assert_eq!(once.tau, twice.tau);
    }

    #[test]
    fn surface_points_of_half_space() {
        // positive for i < 4, negative after: layers i=3 and i=4 straddle
        let mut vol = Volume3::zeros(8, 3, 3, 1.0, [0.0; 3], PayloadKind::SdfMm);
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..8 {
                    vol.set(i, j, k, if i < 4 { 4.0 - i as f32 } else { -(i as f32) + 3.0 });
                }
            }
        }
        let sdf = SdfGrid { vol, tau: 8.0 };
        let pts = extract_surface_points(&sdf).unwrap();
        assert_eq!(pts.len(), 2 * 3 * 3);
        for p in &pts {
            assert!(p[0] == 3.5 || p[0] == 4.5, "unexpected x {}", p[0]);
        }
    }

    #[test]
    fn single_sign_grid_rejected() {
        let mut vol = Volume3::zeros(3, 3, 3, 1.0, [0.0; 3], PayloadKind::SdfMm);
        vol.data.fill(1.0);
        let sdf = SdfGrid { vol, tau: 2.0 };
        assert!(matches!(
            extract_surface_points(&sdf),
            Err(GeometryError::EmptySurface(_))
        ));
    }
}
