//! Direct-loop 2-D convolution registered as a candle custom op.
//!
//! Candle's CPU convolution goes through im2col and a general matmul, which
//! is dominated by copying for the narrow (3-64 channel) feature maps this
//! network uses. These loops keep every inner iteration on a contiguous row
//! so the compiler can vectorize them.

use std::ops::{AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    depthwise: bool,
}

impl Geometry {
    fn new(batch: usize, c_in: usize, c_out: usize, in_h: usize, in_w: usize, spec: &ConvSpec) -> Self {
        // A pointwise kernel sees each plane as one long row.
        let (in_h, in_w) = if spec.kernel == 1 && spec.stride == 1 && spec.pad == 0 {
            (1, in_h * in_w)
        } else {
            (in_h, in_w)
        };
        let out = |n: usize| (n + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        Self {
            batch,
            c_in,
            c_out,
            in_h,
            in_w,
            out_h: out(in_h),
            out_w: out(in_w),
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
            depthwise: spec.depthwise,
        }
    }

    fn kernel_in(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.c_in
        }
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if self.in_w + self.pad <= kx {
            0
        } else {
            ((self.in_w - 1 + self.pad - kx) / self.stride + 1).min(self.out_w)
        };
        (lo.min(hi), hi)
    }

    fn row_of(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        if iy < self.pad || iy - self.pad >= self.in_h {
            None
        } else {
            Some(iy - self.pad)
        }
    }

    /// Pairs of (input channel, kernel input index) feeding output channel `o`.
    fn inputs_of(&self, o: usize) -> std::ops::Range<usize> {
        if self.depthwise {
            o..o + 1
        } else {
            0..self.c_in
        }
    }
}

trait Scalar: Copy + Default + AddAssign + Mul<Output = Self> {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline(always)]
fn forward_generic<T: Scalar>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (oh, ow, k, s) = (g.out_h, g.out_w, g.kernel, g.stride);
    let in_plane = g.in_h * g.in_w;
    let mut out = vec![T::default(); g.batch * g.c_out * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let out_plane = &mut out[(b * g.c_out + o) * oh * ow..][..oh * ow];
            for (ki, c) in g.inputs_of(o).enumerate() {
                let x_plane = &x[(b * g.c_in + c) * in_plane..][..in_plane];
                let wi = if g.depthwise { 0 } else { ki };
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((o * g.kernel_in() + wi) * k + ky) * k + kx];
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let Some(iy) = g.row_of(oy, ky) else { continue };
                            let out_row = &mut out_plane[oy * ow..][lo..hi];
                            let x_row = &x_plane[iy * g.in_w..][..g.in_w];
                            let start = lo * s + kx - g.pad;
                            if s == 1 {
                                for (dst, &src) in out_row.iter_mut().zip(&x_row[start..start + (hi - lo)]) {
                                    *dst += wv * src;
                                }
                            } else {
                                for (j, dst) in out_row.iter_mut().enumerate() {
                                    *dst += wv * x_row[start + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline(always)]
fn backward_input_generic<T: Scalar>(gout: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (oh, ow, k, s) = (g.out_h, g.out_w, g.kernel, g.stride);
    let in_plane = g.in_h * g.in_w;
    let mut gin = vec![T::default(); g.batch * g.c_in * in_plane];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let g_plane = &gout[(b * g.c_out + o) * oh * ow..][..oh * ow];
            for (ki, c) in g.inputs_of(o).enumerate() {
                let wi = if g.depthwise { 0 } else { ki };
                let x_plane = &mut gin[(b * g.c_in + c) * in_plane..][..in_plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((o * g.kernel_in() + wi) * k + ky) * k + kx];
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let Some(iy) = g.row_of(oy, ky) else { continue };
                            let g_row = &g_plane[oy * ow..][lo..hi];
                            let x_row = &mut x_plane[iy * g.in_w..][..g.in_w];
                            let start = lo * s + kx - g.pad;
                            if s == 1 {
                                for (dst, &src) in x_row[start..start + (hi - lo)].iter_mut().zip(g_row) {
                                    *dst += wv * src;
                                }
                            } else {
                                for (j, &src) in g_row.iter().enumerate() {
                                    x_row[start + j * s] += wv * src;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::default(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = T::default();
    for (&x, &y) in ar.iter().zip(br) {
        acc += x * y;
    }
    for l in lanes {
        acc += l;
    }
    acc
}

#[inline(always)]
fn backward_kernel_generic<T: Scalar>(gout: &[T], x: &[T], g: &Geometry) -> Vec<T> {
    let (oh, ow, k, s) = (g.out_h, g.out_w, g.kernel, g.stride);
    let in_plane = g.in_h * g.in_w;
    let kin = g.kernel_in();
    let mut gw = vec![T::default(); g.c_out * kin * k * k];
    for o in 0..g.c_out {
        for (ki, c) in g.inputs_of(o).enumerate() {
            let wi = if g.depthwise { 0 } else { ki };
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = T::default();
                    if lo < hi {
                        for b in 0..g.batch {
                            let g_plane = &gout[(b * g.c_out + o) * oh * ow..][..oh * ow];
                            let x_plane = &x[(b * g.c_in + c) * in_plane..][..in_plane];
                            for oy in 0..oh {
                                let Some(iy) = g.row_of(oy, ky) else { continue };
                                let g_row = &g_plane[oy * ow..][lo..hi];
                                let x_row = &x_plane[iy * g.in_w..][..g.in_w];
                                let start = lo * s + kx - g.pad;
                                if s == 1 {
                                    acc += dot(g_row, &x_row[start..start + (hi - lo)]);
                                } else {
                                    for (j, &a) in g_row.iter().enumerate() {
                                        acc += a * x_row[start + j * s];
                                    }
                                }
                            }
                        }
                    }
                    gw[((o * kin + wi) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    gw
}


// The same loops compiled a second time with AVX2 enabled, chosen at runtime.
macro_rules! dispatch {
    ($name:ident, $generic:ident, $avx:ident) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $avx<T: Scalar>(a: &[T], b: &[T], g: &Geometry) -> Vec<T> {
            $generic(a, b, g)
        }

        fn $name<T: Scalar>(a: &[T], b: &[T], g: &Geometry) -> Vec<T> {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were detected above.
                return unsafe { $avx(a, b, g) };
            }
            $generic(a, b, g)
        }
    };
}

dispatch!(forward, forward_generic, forward_avx2);
dispatch!(backward_input, backward_input_generic, backward_input_avx2);
dispatch!(backward_kernel, backward_kernel_generic, backward_kernel_avx2);

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv kernel expects contiguous inputs"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

struct ConvForward(ConvSpec);

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "direct-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c_in, h, w) = l1.shape().dims4()?;
        let c_out = l2.shape().dims()[0];
        let g = Geometry::new(b, c_in, c_out, h, w, &self.0);
        let out_dim = |n: usize| (n + 2 * self.0.pad - self.0.kernel) / self.0.stride + 1;
        let shape = Shape::from((b, c_out, out_dim(h), out_dim(w)));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(wt)) => CpuStorage::F32(forward(contiguous(x, l1)?, contiguous(wt, l2)?, &g)),
            (CpuStorage::F64(x), CpuStorage::F64(wt)) => CpuStorage::F64(forward(contiguous(x, l1)?, contiguous(wt, l2)?, &g)),
            _ => candle_core::bail!("conv kernel supports f32/f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let gx = grad.apply_op2_no_bwd(w, &ConvInputGrad { spec: self.0, in_h: h, in_w: wd })?;
        let gw = grad.apply_op2_no_bwd(x, &ConvKernelGrad { spec: self.0, in_h: h, in_w: wd })?;
        Ok((Some(gx), Some(gw)))
    }
}

struct ConvInputGrad {
    spec: ConvSpec,
    in_h: usize,
    in_w: usize,
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "direct-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c_out, _, _) = l1.shape().dims4()?;
        let wdims = l2.shape().dims();
        let c_in = if self.spec.depthwise { wdims[0] } else { wdims[1] };
        let g = Geometry::new(b, c_in, c_out, self.in_h, self.in_w, &self.spec);
        let shape = Shape::from((b, c_in, self.in_h, self.in_w));
        let out = match (s1, s2) {
            (CpuStorage::F32(gr), CpuStorage::F32(wt)) => CpuStorage::F32(backward_input(contiguous(gr, l1)?, contiguous(wt, l2)?, &g)),
            (CpuStorage::F64(gr), CpuStorage::F64(wt)) => CpuStorage::F64(backward_input(contiguous(gr, l1)?, contiguous(wt, l2)?, &g)),
            _ => candle_core::bail!("conv kernel supports f32/f64 only"),
        };
        Ok((out, shape))
    }
}

struct ConvKernelGrad {
    spec: ConvSpec,
    in_h: usize,
    in_w: usize,
}

impl CustomOp2 for ConvKernelGrad {
    fn name(&self) -> &'static str {
        "direct-conv2d-kernel-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c_out, _, _) = l1.shape().dims4()?;
        let (_, c_in, _, _) = l2.shape().dims4()?;
        let g = Geometry::new(b, c_in, c_out, self.in_h, self.in_w, &self.spec);
        let k = self.spec.kernel;
        let shape = Shape::from((c_out, g.kernel_in(), k, k));
        let out = match (s1, s2) {
            (CpuStorage::F32(gr), CpuStorage::F32(x)) => CpuStorage::F32(backward_kernel(contiguous(gr, l1)?, contiguous(x, l2)?, &g)),
            (CpuStorage::F64(gr), CpuStorage::F64(x)) => CpuStorage::F64(backward_kernel(contiguous(gr, l1)?, contiguous(x, l2)?, &g)),
            _ => candle_core::bail!("conv kernel supports f32/f64 only"),
        };
        Ok((out, shape))
    }
}

/// Convolution without bias. `weight` is `(c_out, c_in, k, k)`, or
/// `(c, 1, k, k)` when `spec.depthwise`.
pub fn conv2d(x: &Tensor, weight: &Tensor, spec: ConvSpec) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, ConvForward(spec))
}
