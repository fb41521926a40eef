//! Low-level numeric kernels behind the tensor ops.
//!
//! Convolution is lowered to im2col followed by a blocked matrix product.
//! The inner loops are written so the autovectorizer can work on contiguous
//! slices; summation order is fixed, so results are deterministic.

use super::Scalar;

/// c[m][n] += a[m][k] * b[k][n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// c[m][n] += aᵀ[m][k] * b[k][n] where `a` is stored as [k][m].
pub fn matmul_ta_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// c[m][n] += a[m][k] * bᵀ[k][n] where `b` is stored as [n][k].
pub fn matmul_tb_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            c_row[j] += acc;
        }
    }
}

/// Geometry of one conv3d lowering: cubic kernel, isotropic stride/padding.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_d: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_d: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn out_extent(inp: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = inp + 2 * padding;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn out_voxels(&self) -> usize {
        self.out_d * self.out_h * self.out_w
    }

    pub fn col_rows(&self) -> usize {
        self.channels_in * self.kernel * self.kernel * self.kernel
    }
}

/// Unfolds one sample `[C, D, H, W]` into `col[C*k^3][outD*outH*outW]`.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(input.len(), g.channels_in * g.in_d * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.col_rows() * g.out_voxels());
    let ov = g.out_voxels();
    let in_plane = g.in_h * g.in_w;
    let mut row = 0usize;
    for c in 0..g.channels_in {
        let chan = &input[c * g.in_d * in_plane..(c + 1) * g.in_d * in_plane];
        for kd in 0..g.kernel {
            for kh in 0..g.kernel {
                for kw in 0..g.kernel {
                    let dst = &mut col[row * ov..(row + 1) * ov];
                    let mut o = 0usize;
                    for od in 0..g.out_d {
                        let id = (od * g.stride + kd) as isize - g.padding as isize;
                        for oh in 0..g.out_h {
                            let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                            if id < 0
                                || id >= g.in_d as isize
                                || ih < 0
                                || ih >= g.in_h as isize
                            {
                                for _ in 0..g.out_w {
                                    dst[o] = T::zero();
                                    o += 1;
                                }
                                continue;
                            }
                            let base = id as usize * in_plane + ih as usize * g.in_w;
                            let iw0 = kw as isize - g.padding as isize;
                            if g.stride == 1 {
                                // Contiguous run; split off the out-of-range edges.
                                for ow in 0..g.out_w {
                                    let iw = ow as isize + iw0;
                                    dst[o] = if iw >= 0 && iw < g.in_w as isize {
                                        chan[base + iw as usize]
                                    } else {
                                        T::zero()
                                    };
                                    o += 1;
                                }
                            } else {
                                for ow in 0..g.out_w {
                                    let iw = (ow * g.stride) as isize + iw0;
                                    dst[o] = if iw >= 0 && iw < g.in_w as isize {
                                        chan[base + iw as usize]
                                    } else {
                                        T::zero()
                                    };
                                    o += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Folds `col`-layout gradients back onto the input grid, accumulating
/// overlapping contributions. Inverse scatter of [`im2col`].
pub fn col2im_acc<T: Scalar>(col: &[T], g: &ConvGeom, input_grad: &mut [T]) {
    debug_assert_eq!(input_grad.len(), g.channels_in * g.in_d * g.in_h * g.in_w);
    let ov = g.out_voxels();
    let in_plane = g.in_h * g.in_w;
    let mut row = 0usize;
    for c in 0..g.channels_in {
        let chan_base = c * g.in_d * in_plane;
        for kd in 0..g.kernel {
            for kh in 0..g.kernel {
                for kw in 0..g.kernel {
                    let src = &col[row * ov..(row + 1) * ov];
                    let mut o = 0usize;
                    for od in 0..g.out_d {
                        let id = (od * g.stride + kd) as isize - g.padding as isize;
                        for oh in 0..g.out_h {
                            let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                            if id < 0
                                || id >= g.in_d as isize
                                || ih < 0
                                || ih >= g.in_h as isize
                            {
                                o += g.out_w;
                                continue;
                            }
                            let base = chan_base + id as usize * in_plane + ih as usize * g.in_w;
                            for ow in 0..g.out_w {
                                let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                                if iw >= 0 && iw < g.in_w as isize {
                                    input_grad[base + iw as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
