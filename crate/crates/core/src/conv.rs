//! 2-D cross-correlation kernels on `f64` buffers in NCHW layout.
//!
//! Three paths share one contract: a direct loop for depthwise kernels, a
//! copy-free GEMM for stride-1 pointwise kernels, and im2col + GEMM for
//! everything else. Parallelism is over batch items (and channels for the
//! depthwise path); every output element has a fixed reduction order, and
//! cross-batch weight-gradient sums run sequentially in batch order.

use rayon::prelude::*;

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Dims;

/// Stride, dilation, groups and symmetric zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// "Same" padding: output extent equals input extent at stride 1.
    pub fn same(kernel: usize, stride: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            dilation,
            groups,
            padding: dilation * (kernel.saturating_sub(1)) / 2,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1, 1, 1, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self::same(kernel, 1, dilation, channels)
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            0
        } else {
            (padded - span) / self.stride + 1
        }
    }

    /// Checks the spec against input and kernel dims and returns output dims.
    pub fn output_dims(&self, input: Dims, kernel: Dims) -> Result<Dims> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return config_err(format!(
                "stride, dilation and groups must be positive, got {:?}",
                self
            ));
        }
        let [_, cin, h, w] = input;
        let [cout, cin_g, kh, kw] = kernel;
        if kh == 0 || kw == 0 || kh != kw {
            return shape_err(format!("kernel must be square and non-empty, got {:?}", kernel));
        }
        if cin % self.groups != 0 || cout % self.groups != 0 {
            return shape_err(format!(
                "channels in={} out={} not divisible by groups {}",
                cin, cout, self.groups
            ));
        }
        if cin / self.groups != cin_g {
            return shape_err(format!(
                "kernel {:?} expects {} input channels per group, input has {} channels / {} groups",
                kernel, cin_g, cin, self.groups
            ));
        }
        let oh = self.output_extent(h, kh);
        let ow = self.output_extent(w, kw);
        if oh == 0 || ow == 0 {
            return shape_err(format!(
                "input {}x{} too small for kernel {} at dilation {}",
                h, w, kh, self.dilation
            ));
        }
        Ok([input[0], cout, oh, ow])
    }

    fn is_depthwise(&self, input: Dims, kernel: Dims) -> bool {
        self.groups == input[1] && kernel[0] == input[1] && kernel[1] == 1
    }

    fn is_plain_pointwise(&self, kernel: Dims) -> bool {
        kernel[2] == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Number of multiply-accumulates a forward pass performs.
pub fn conv_macs(input: Dims, kernel: Dims, output: Dims) -> u64 {
    let _ = input;
    (output.iter().product::<usize>() * kernel[1] * kernel[2] * kernel[3]) as u64
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with optional transposes of
/// the row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn new(input: Dims, kernel: Dims, out: Dims, spec: &ConvSpec) -> Self {
        Self {
            cin: input[1],
            h: input[2],
            w: input[3],
            cout: kernel[0],
            k: kernel[2],
            oh: out[2],
            ow: out[3],
            stride: spec.stride,
            dilation: spec.dilation,
            pad: spec.padding,
            groups: spec.groups,
        }
    }

    /// Output columns `[lo, hi)` whose input column for tap `kx` is in bounds.
    #[inline]
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // input index = o * stride + tap * dilation - pad
        let off = (tap * self.dilation) as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let lo = lo.clamp(0, out_extent as isize) as usize;
        let hi = hi.clamp(0, out_extent as isize) as usize;
        (lo, hi.max(lo))
    }

    /// im2col for channels `[c0, c0+cg)` of one batch item.
    fn im2col(&self, x: &[f64], c0: usize, cg: usize, col: &mut [f64]) {
        let (k, oh, ow) = (self.k, self.oh, self.ow);
        col.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..cg {
            let plane = &x[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ky in 0..k {
                let (ylo, yhi) = self.valid_range(ky, self.h, oh);
                for kx in 0..k {
                    let (xlo, xhi) = self.valid_range(kx, self.w, ow);
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky * self.dilation - self.pad;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        for ox in xlo..xhi {
                            d[ox] = src[ox * self.stride + kx * self.dilation - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters `col` into `dx`.
    fn col2im(&self, col: &[f64], c0: usize, cg: usize, dx: &mut [f64]) {
        let (k, oh, ow) = (self.k, self.oh, self.ow);
        for c in 0..cg {
            let plane = &mut dx[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ky in 0..k {
                let (ylo, yhi) = self.valid_range(ky, self.h, oh);
                for kx in 0..k {
                    let (xlo, xhi) = self.valid_range(kx, self.w, ow);
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky * self.dilation - self.pad;
                        let d = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let s = &src[oy * ow..(oy + 1) * ow];
                        for ox in xlo..xhi {
                            d[ox * self.stride + kx * self.dilation - self.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation. Returns the output buffer and its dims.
pub fn conv2d_forward(
    x: &[f64],
    input: Dims,
    w: &[f64],
    kernel: Dims,
    spec: &ConvSpec,
) -> Result<(Vec<f64>, Dims)> {
    let out = spec.output_dims(input, kernel)?;
    let g = Geometry::new(input, kernel, out, spec);
    let in_item = g.cin * g.h * g.w;
    let out_plane = g.oh * g.ow;
    let out_item = g.cout * out_plane;
    let mut y = vec![0.0; input[0] * out_item];

    if spec.is_depthwise(input, kernel) {
        let kk = g.k * g.k;
        y.par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(bc, dst)| {
                let c = bc % g.cin;
                let plane = &x[bc * g.h * g.w..(bc + 1) * g.h * g.w];
                let wk = &w[c * kk..(c + 1) * kk];
                for ky in 0..g.k {
                    let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.k {
                        let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                        let wv = wk[ky * g.k + kx];
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky * g.dilation - g.pad;
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            for ox in xlo..xhi {
                                d[ox] += wv * src[ox * g.stride + kx * g.dilation - g.pad];
                            }
                        }
                    }
                }
            });
        return Ok((y, out));
    }

    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kdim = cin_g * g.k * g.k;
    let pointwise = spec.is_plain_pointwise(kernel);
    y.par_chunks_mut(out_item)
        .enumerate()
        .for_each(|(b, dst)| {
            let xb = &x[b * in_item..(b + 1) * in_item];
            let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * out_plane] };
            for grp in 0..g.groups {
                let wg = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let yg = &mut dst[grp * cout_g * out_plane..(grp + 1) * cout_g * out_plane];
                if pointwise {
                    let xg = &xb[grp * cin_g * out_plane..(grp + 1) * cin_g * out_plane];
                    gemm(cout_g, kdim, out_plane, wg, false, xg, false, 0.0, yg);
                } else {
                    g.im2col(xb, grp * cin_g, cin_g, &mut col);
                    gemm(cout_g, kdim, out_plane, wg, false, &col, false, 0.0, yg);
                }
            }
        });
    Ok((y, out))
}

/// Adjoints of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward(
    x: &[f64],
    input: Dims,
    w: &[f64],
    kernel: Dims,
    spec: &ConvSpec,
    dy: &[f64],
    need_dx: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let out = spec.output_dims(input, kernel)?;
    if dy.len() != out.iter().product::<usize>() {
        return shape_err(format!(
            "upstream gradient has {} values, forward output is {:?}",
            dy.len(),
            out
        ));
    }
    let g = Geometry::new(input, kernel, out, spec);
    let batch = input[0];
    let in_item = g.cin * g.h * g.w;
    let out_plane = g.oh * g.ow;
    let out_item = g.cout * out_plane;
    let mut dx = vec![0.0; x.len()];

    if spec.is_depthwise(input, kernel) {
        let kk = g.k * g.k;
        // Per (batch, channel) kernel-gradient partials, reduced over batch below.
        let mut dw_parts = vec![0.0; batch * g.cin * kk];
        dx.par_chunks_mut(g.h * g.w)
            .zip(dw_parts.par_chunks_mut(kk))
            .enumerate()
            .for_each(|(bc, (dplane, dwk))| {
                let c = bc % g.cin;
                let plane = &x[bc * g.h * g.w..(bc + 1) * g.h * g.w];
                let up = &dy[bc * out_plane..(bc + 1) * out_plane];
                let wk = &w[c * kk..(c + 1) * kk];
                for ky in 0..g.k {
                    let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.k {
                        let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                        let wv = wk[ky * g.k + kx];
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky * g.dilation - g.pad;
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dplane[iy * g.w..(iy + 1) * g.w];
                            let u = &up[oy * g.ow..(oy + 1) * g.ow];
                            for ox in xlo..xhi {
                                let ix = ox * g.stride + kx * g.dilation - g.pad;
                                acc += u[ox] * src[ix];
                                if need_dx {
                                    drow[ix] += wv * u[ox];
                                }
                            }
                        }
                        dwk[ky * g.k + kx] = acc;
                    }
                }
            });
        let mut dw = vec![0.0; g.cin * kk];
        for b in 0..batch {
            for (d, p) in dw
                .iter_mut()
                .zip(&dw_parts[b * g.cin * kk..(b + 1) * g.cin * kk])
            {
                *d += p;
            }
        }
        return Ok((dx, dw));
    }

    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kdim = cin_g * g.k * g.k;
    let pointwise = spec.is_plain_pointwise(kernel);
    let wlen = w.len();
    let mut dw_parts = vec![0.0; batch * wlen];
    dx.par_chunks_mut(in_item)
        .zip(dw_parts.par_chunks_mut(wlen))
        .enumerate()
        .for_each(|(b, (dxb, dwb))| {
            let xb = &x[b * in_item..(b + 1) * in_item];
            let dyb = &dy[b * out_item..(b + 1) * out_item];
            let mut col = vec![0.0; kdim * out_plane];
            for grp in 0..g.groups {
                let wg = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let dwg = &mut dwb[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let dyg = &dyb[grp * cout_g * out_plane..(grp + 1) * cout_g * out_plane];
                // Kernel gradient: dY (cout_g x P) * col^T (P x kdim).
                if pointwise {
                    let xg = &xb[grp * cin_g * out_plane..(grp + 1) * cin_g * out_plane];
                    gemm(cout_g, out_plane, kdim, dyg, false, xg, true, 0.0, dwg);
                    if !need_dx {
                        continue;
                    }
                    let dxg = &mut dxb[grp * cin_g * out_plane..(grp + 1) * cin_g * out_plane];
                    gemm(kdim, cout_g, out_plane, wg, true, dyg, false, 1.0, dxg);
                } else {
                    g.im2col(xb, grp * cin_g, cin_g, &mut col);
                    gemm(cout_g, out_plane, kdim, dyg, false, &col, true, 0.0, dwg);
                    if !need_dx {
                        continue;
                    }
                    gemm(kdim, cout_g, out_plane, wg, true, dyg, false, 0.0, &mut col);
                    g.col2im(&col, grp * cin_g, cin_g, dxb);
                }
            }
        });
    let mut dw = vec![0.0; wlen];
    for b in 0..batch {
        for (d, p) in dw.iter_mut().zip(&dw_parts[b * wlen..(b + 1) * wlen]) {
            *d += p;
        }
    }
    Ok((dx, dw))
}
