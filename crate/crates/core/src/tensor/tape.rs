//! Define-by-run operation recording and the reverse sweep.
//!
//! Each op computes its forward result eagerly; when any input participates
//! in differentiation the op is appended to the tape together with a
//! backward rule. [`Tape::backward`] walks the list in reverse, reading the
//! output gradient of each op and accumulating into its inputs. Recording
//! order is construction order, so the topological invariant holds by
//! definition. A tape is rebuilt per training step and never shared across
//! threads.

use std::cell::RefCell;

use super::kernels::{self, ConvGeom};
use super::{broadcast_shapes, Result, Scalar, Tensor, TensorError};

type BackwardFn<T> = Box<dyn Fn(&[Tensor<T>], &Tensor<T>)>;

struct TapeOp<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
    backward: BackwardFn<T>,
}

/// Ordered record of differentiable operations.
pub struct Tape<T: Scalar> {
    ops: RefCell<Vec<TapeOp<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { ops: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn output(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        let rec = inputs.iter().any(Tensor::needs_grad);
        let out = Tensor::from_vec(shape, data);
        if rec {
            let out = out.requires_grad();
            self.ops.borrow_mut().push(TapeOp { inputs, output: out.clone(), backward });
            out
        } else {
            out
        }
    }

    /// Accumulates gradients for every `requires_grad` tensor reachable from
    /// `loss`. Calling twice without zeroing doubles leaf gradients.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if !loss.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        loss.zero_grad();
        loss.accumulate_grad(&[T::one()]);
        let ops = self.ops.borrow();
        for op in ops.iter().rev() {
            if op.output.has_grad() {
                (op.backward)(&op.inputs, &op.output);
            }
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("add", a, b, |x, y| x + y, |_x, _y, g| (g, g))
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("sub", a, b, |x, y| x - y, |_x, _y, g| (g, -g))
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    /// Multiplies by a compile-time-known constant.
    pub fn scale(&self, a: &Tensor<T>, c: T) -> Tensor<T> {
        let data = a.data().iter().map(|&x| x * c).collect();
        self.output(
            a.shape().to_vec(),
            data,
            vec![a.clone()],
            Box::new(move |inputs, out| {
                let a = &inputs[0];
                if !a.needs_grad() {
                    return;
                }
                out.with_grad(|g| {
                    let delta: Vec<T> = g.iter().map(|&gv| gv * c).collect();
                    a.accumulate_grad_owned(delta);
                });
            }),
        )
    }

    pub fn silu(&self, a: &Tensor<T>) -> Tensor<T> {
        let data = a.data().iter().map(|&x| x * sigmoid(x)).collect();
        self.output(
            a.shape().to_vec(),
            data,
            vec![a.clone()],
            Box::new(|inputs, out| {
                let a = &inputs[0];
                if !a.needs_grad() {
                    return;
                }
                out.with_grad(|g| {
                    let delta: Vec<T> = a
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (T::one() - s))
                        })
                        .collect();
                    a.accumulate_grad_owned(delta);
                });
            }),
        )
    }

    fn binary(
        &self,
        op: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        fwd: fn(T, T) -> T,
        bwd: fn(T, T, T) -> (T, T),
    ) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(op, a.shape(), b.shape())?;
        if a.shape() == b.shape() {
            let data: Vec<T> =
                a.data().iter().zip(b.data()).map(|(&x, &y)| fwd(x, y)).collect();
            return Ok(self.output(
                out_shape,
                data,
                vec![a.clone(), b.clone()],
                Box::new(move |inputs, out| {
                    let (a, b) = (&inputs[0], &inputs[1]);
                    out.with_grad(|g| {
                        let n = g.len();
                        let mut ga = if a.needs_grad() { vec![T::zero(); n] } else { Vec::new() };
                        let mut gb = if b.needs_grad() { vec![T::zero(); n] } else { Vec::new() };
                        for i in 0..n {
                            let (da, db) = bwd(a.data()[i], b.data()[i], g[i]);
                            if !ga.is_empty() {
                                ga[i] = da;
                            }
                            if !gb.is_empty() {
                                gb[i] = db;
                            }
                        }
                        if !ga.is_empty() {
                            a.accumulate_grad_owned(ga);
                        }
                        if !gb.is_empty() {
                            b.accumulate_grad_owned(gb);
                        }
                    });
                }),
            ));
        }
        // broadcast path
        let map_a = BroadcastMap::new(&out_shape, a.shape());
        let map_b = BroadcastMap::new(&out_shape, b.shape());
        let n: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); n];
        {
            let ad = a.data();
            let bd = b.data();
            let mut idx = vec![0usize; out_shape.len()];
            for v in data.iter_mut() {
                *v = fwd(ad[map_a.offset(&idx)], bd[map_b.offset(&idx)]);
                step_index(&mut idx, &out_shape);
            }
        }
        let out_shape_c = out_shape.clone();
        Ok(self.output(
            out_shape,
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |inputs, out| {
                let (a, b) = (&inputs[0], &inputs[1]);
                out.with_grad(|g| {
                    let mut ga =
                        if a.needs_grad() { vec![T::zero(); a.numel()] } else { Vec::new() };
                    let mut gb =
                        if b.needs_grad() { vec![T::zero(); b.numel()] } else { Vec::new() };
                    let ad = a.data();
                    let bd = b.data();
                    let mut idx = vec![0usize; out_shape_c.len()];
                    for &gv in g.iter() {
                        let ia = map_a.offset(&idx);
                        let ib = map_b.offset(&idx);
                        let (da, db) = bwd(ad[ia], bd[ib], gv);
                        if !ga.is_empty() {
                            ga[ia] += da;
                        }
                        if !gb.is_empty() {
                            gb[ib] += db;
                        }
                        step_index(&mut idx, &out_shape_c);
                    }
                    if !ga.is_empty() {
                        a.accumulate_grad_owned(ga);
                    }
                    if !gb.is_empty() {
                        b.accumulate_grad_owned(gb);
                    }
                });
            }),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&self, a: &Tensor<T>) -> Tensor<T> {
        let total = a.data().iter().copied().fold(T::zero(), |acc, x| acc + x);
        self.output(
            vec![1],
            vec![total],
            vec![a.clone()],
            Box::new(|inputs, out| {
                let a = &inputs[0];
                if !a.needs_grad() {
                    return;
                }
                out.with_grad(|g| {
                    a.accumulate_grad_owned(vec![g[0]; a.numel()]);
                });
            }),
        )
    }

    pub fn mean(&self, a: &Tensor<T>) -> Tensor<T> {
        let n = T::from_f64(a.numel() as f64);
        let total = a.data().iter().copied().fold(T::zero(), |acc, x| acc + x);
        self.output(
            vec![1],
            vec![total / n],
            vec![a.clone()],
            Box::new(move |inputs, out| {
                let a = &inputs[0];
                if !a.needs_grad() {
                    return;
                }
                out.with_grad(|g| {
                    a.accumulate_grad_owned(vec![g[0] / n; a.numel()]);
                });
            }),
        )
    }

    /// Per-element mean squared error between two same-shape tensors.
    pub fn mse(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        Ok(self.mean(&sq))
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Concatenates two `[N, C, D, H, W]` tensors along the channel axis.
    pub fn concat_channels(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 5 || sb.len() != 5 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let spatial: usize = sa[2..].iter().product();
        let mut data = vec![T::zero(); n * (ca + cb) * spatial];
        for i in 0..n {
            let dst = &mut data[i * (ca + cb) * spatial..];
            dst[..ca * spatial]
                .copy_from_slice(&a.data()[i * ca * spatial..(i + 1) * ca * spatial]);
            dst[ca * spatial..(ca + cb) * spatial]
                .copy_from_slice(&b.data()[i * cb * spatial..(i + 1) * cb * spatial]);
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        Ok(self.output(
            shape,
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |inputs, out| {
                let (a, b) = (&inputs[0], &inputs[1]);
                out.with_grad(|g| {
                    if a.needs_grad() {
                        let mut ga = vec![T::zero(); n * ca * spatial];
                        for i in 0..n {
                            ga[i * ca * spatial..(i + 1) * ca * spatial].copy_from_slice(
                                &g[i * (ca + cb) * spatial..i * (ca + cb) * spatial + ca * spatial],
                            );
                        }
                        a.accumulate_grad_owned(ga);
                    }
                    if b.needs_grad() {
                        let mut gb = vec![T::zero(); n * cb * spatial];
                        for i in 0..n {
                            gb[i * cb * spatial..(i + 1) * cb * spatial].copy_from_slice(
                                &g[i * (ca + cb) * spatial + ca * spatial
                                    ..(i + 1) * (ca + cb) * spatial],
                            );
                        }
                        b.accumulate_grad_owned(gb);
                    }
                });
            }),
        ))
    }

    /// Nearest-neighbor 2x upsampling of each spatial axis of `[N,C,D,H,W]`.
    pub fn upsample_nearest2(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 5 {
            return Err(TensorError::Invalid {
                op: "upsample_nearest2",
                msg: format!("expected rank-5 input, got {:?}", s),
            });
        }
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut data = vec![T::zero(); n * c * od * oh * ow];
        {
            let src = a.data();
            for nc in 0..n * c {
                let sp = &src[nc * d * h * w..];
                let dp = &mut data[nc * od * oh * ow..(nc + 1) * od * oh * ow];
                for z in 0..od {
                    for y in 0..oh {
                        let row = &sp[(z / 2) * h * w + (y / 2) * w..];
                        let out_row = &mut dp[z * oh * ow + y * ow..][..ow];
                        for x in 0..ow {
                            out_row[x] = row[x / 2];
                        }
                    }
                }
            }
        }
        Ok(self.output(
            vec![n, c, od, oh, ow],
            data,
            vec![a.clone()],
            Box::new(move |inputs, out| {
                let a = &inputs[0];
                if !a.needs_grad() {
                    return;
                }
                out.with_grad(|g| {
                    let mut ga = vec![T::zero(); n * c * d * h * w];
                    for nc in 0..n * c {
                        let gp = &g[nc * od * oh * ow..];
                        let ap = &mut ga[nc * d * h * w..(nc + 1) * d * h * w];
                        for z in 0..od {
                            for y in 0..oh {
                                let grow = &gp[z * oh * ow + y * ow..][..ow];
                                let arow = &mut ap[(z / 2) * h * w + (y / 2) * w..][..w];
                                for x in 0..ow {
                                    arow[x / 2] += grow[x];
                                }
                            }
                        }
                    }
                    a.accumulate_grad_owned(ga);
                });
            }),
        ))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 3D cross-correlation of `[N,C,D,H,W]` with a cubic kernel
    /// `[K,C,k,k,k]` and bias `[K]`. Stride 1 or 2, symmetric zero padding.
    pub fn conv3d(
        &self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let s = input.shape();
        let ks = kernel.shape();
        if s.len() != 5 || ks.len() != 5 || ks[2] != ks[3] || ks[3] != ks[4] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: s.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if ks[1] != s[1] {
            return Err(TensorError::ChannelMismatch {
                op: "conv3d",
                expected: ks[1],
                got: s[1],
            });
        }
        if bias.shape() != [ks[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                lhs: bias.shape().to_vec(),
                rhs: vec![ks[0]],
            });
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        let k = ks[2];
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = match (
            ConvGeom::out_extent(d, k, stride, padding),
            ConvGeom::out_extent(h, k, stride, padding),
            ConvGeom::out_extent(w, k, stride, padding),
        ) {
            (Some(a), Some(b), Some(cc)) if a > 0 && b > 0 && cc > 0 => (a, b, cc),
            _ => {
                return Err(TensorError::EmptyOutput {
                    op: "conv3d",
                    input: s.to_vec(),
                    kernel: k,
                    stride,
                    padding,
                })
            }
        };
        let geom = ConvGeom {
            channels_in: c,
            channels_out: ks[0],
            kernel: k,
            stride,
            padding,
            in_d: d,
            in_h: h,
            in_w: w,
            out_d: od,
            out_h: oh,
            out_w: ow,
        };
        let ov = geom.out_voxels();
        let kc = geom.col_rows();
        let kn = geom.channels_out;
        let rec = input.needs_grad() || kernel.needs_grad() || bias.needs_grad();

        let mut out = vec![T::zero(); n * kn * ov];
        let mut cols: Vec<Vec<T>> = Vec::new();
        let mut scratch = vec![T::zero(); kc * ov];
        for i in 0..n {
            let sample = &input.data()[i * c * d * h * w..(i + 1) * c * d * h * w];
            kernels::im2col(sample, &geom, &mut scratch);
            let dst = &mut out[i * kn * ov..(i + 1) * kn * ov];
            for ch in 0..kn {
                let b = bias.data()[ch];
                for v in &mut dst[ch * ov..(ch + 1) * ov] {
                    *v = b;
                }
            }
            kernels::matmul_acc(kernel.data(), &scratch, dst, kn, kc, ov);
            if rec {
                cols.push(scratch.clone());
            }
        }

        Ok(self.output(
            vec![n, kn, od, oh, ow],
            out,
            vec![input.clone(), kernel.clone(), bias.clone()],
            Box::new(move |inputs, out| {
                let (input, kernel, bias) = (&inputs[0], &inputs[1], &inputs[2]);
                out.with_grad(|g| {
                    if bias.needs_grad() {
                        let mut gb = vec![T::zero(); kn];
                        for i in 0..n {
                            let go = &g[i * kn * ov..(i + 1) * kn * ov];
                            for ch in 0..kn {
                                gb[ch] += go[ch * ov..(ch + 1) * ov]
                                    .iter()
                                    .copied()
                                    .fold(T::zero(), |a, x| a + x);
                            }
                        }
                        bias.accumulate_grad_owned(gb);
                    }
                    if kernel.needs_grad() {
                        let mut gw = vec![T::zero(); kn * kc];
                        for i in 0..n {
                            let go = &g[i * kn * ov..(i + 1) * kn * ov];
                            kernels::matmul_tb_acc(go, &cols[i], &mut gw, kn, ov, kc);
                        }
                        kernel.accumulate_grad_owned(gw);
                    }
                    if input.needs_grad() {
                        let mut gi = vec![T::zero(); n * c * d * h * w];
                        let mut gcol = vec![T::zero(); kc * ov];
                        for i in 0..n {
                            let go = &g[i * kn * ov..(i + 1) * kn * ov];
                            for v in &mut gcol {
                                *v = T::zero();
                            }
                            kernels::matmul_ta_acc(kernel.data(), go, &mut gcol, kc, kn, ov);
                            kernels::col2im_acc(
                                &gcol,
                                &geom,
                                &mut gi[i * c * d * h * w..(i + 1) * c * d * h * w],
                            );
                        }
                        input.accumulate_grad_owned(gi);
                    }
                });
            }),
        ))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Group normalization over `[N,C,D,H,W]` with per-channel affine.
    /// Statistics are taken per (sample, group) with biased variance.
    pub fn group_norm(
        &self,
        input: &Tensor<T>,
        groups: usize,
        gain: &Tensor<T>,
        shift: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.len() != 5 {
            return Err(TensorError::Invalid {
                op: "group_norm",
                msg: format!("expected rank-5 input, got {:?}", s),
            });
        }
        let (n, c) = (s[0], s[1]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Invalid {
                op: "group_norm",
                msg: format!("channel count {c} not divisible by groups {groups}"),
            });
        }
        if gain.shape() != [c] || shift.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm affine",
                lhs: gain.shape().to_vec(),
                rhs: vec![c],
            });
        }
        let spatial: usize = s[2..].iter().product();
        let cg = c / groups;
        let m = cg * spatial;
        let m_t = T::from_f64(m as f64);

        let mut data = vec![T::zero(); input.numel()];
        let mut means = vec![T::zero(); n * groups];
        let mut rstds = vec![T::zero(); n * groups];
        {
            let x = input.data();
            for i in 0..n {
                for gidx in 0..groups {
                    let base = i * c * spatial + gidx * cg * spatial;
                    let grp = &x[base..base + m];
                    let mean = grp.iter().copied().fold(T::zero(), |a, v| a + v) / m_t;
                    let var = grp
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .fold(T::zero(), |a, v| a + v)
                        / m_t;
                    let rstd = T::one() / (var + eps).sqrt();
                    means[i * groups + gidx] = mean;
                    rstds[i * groups + gidx] = rstd;
                    for lc in 0..cg {
                        let ch = gidx * cg + lc;
                        let gam = gain.data()[ch];
                        let bet = shift.data()[ch];
                        let src = &x[base + lc * spatial..base + (lc + 1) * spatial];
                        let dst = &mut data[base + lc * spatial..base + (lc + 1) * spatial];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = (v - mean) * rstd * gam + bet;
                        }
                    }
                }
            }
        }

        Ok(self.output(
            s.to_vec(),
            data,
            vec![input.clone(), gain.clone(), shift.clone()],
            Box::new(move |inputs, out| {
                let (input, gain, shift) = (&inputs[0], &inputs[1], &inputs[2]);
                out.with_grad(|gy| {
                    let x = input.data();
                    let mut gx = if input.needs_grad() {
                        vec![T::zero(); input.numel()]
                    } else {
                        Vec::new()
                    };
                    let mut ggain =
                        if gain.needs_grad() { vec![T::zero(); c] } else { Vec::new() };
                    let mut gshift =
                        if shift.needs_grad() { vec![T::zero(); c] } else { Vec::new() };
                    for i in 0..n {
                        for gidx in 0..groups {
                            let base = i * c * spatial + gidx * cg * spatial;
                            let mean = means[i * groups + gidx];
                            let rstd = rstds[i * groups + gidx];
                            // dxhat = gy * gain; reduce within the group
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for lc in 0..cg {
                                let ch = gidx * cg + lc;
                                let gam = gain.data()[ch];
                                for sp in 0..spatial {
                                    let idx = base + lc * spatial + sp;
                                    let xhat = (x[idx] - mean) * rstd;
                                    let dxh = gy[idx] * gam;
                                    s1 += dxh;
                                    s2 += dxh * xhat;
                                    if !ggain.is_empty() {
                                        ggain[ch] += gy[idx] * xhat;
                                    }
                                    if !gshift.is_empty() {
                                        gshift[ch] += gy[idx];
                                    }
                                }
                            }
                            if !gx.is_empty() {
                                let c1 = s1 / m_t;
                                let c2 = s2 / m_t;
                                for lc in 0..cg {
                                    let ch = gidx * cg + lc;
                                    let gam = gain.data()[ch];
                                    for sp in 0..spatial {
                                        let idx = base + lc * spatial + sp;
                                        let xhat = (x[idx] - mean) * rstd;
                                        gx[idx] = rstd * (gy[idx] * gam - c1 - xhat * c2);
                                    }
                                }
                            }
                        }
                    }
                    if !gx.is_empty() {
                        input.accumulate_grad_owned(gx);
                    }
                    if !ggain.is_empty() {
                        gain.accumulate_grad_owned(ggain);
                    }
                    if !gshift.is_empty() {
                        shift.accumulate_grad_owned(gshift);
                    }
                });
            }),
        ))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Offset computation for one operand under trailing-dimension broadcasting.
struct BroadcastMap {
    strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let offset = rank - in_shape.len();
        let mut strides = vec![0usize; rank];
        let mut stride = 1usize;
        for i in (0..in_shape.len()).rev() {
            strides[offset + i] = if in_shape[i] == 1 { 0 } else { stride };
            stride *= in_shape[i];
        }
        BroadcastMap { strides }
    }

    fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }
}

fn step_index(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}
