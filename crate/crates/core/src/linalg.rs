//! Dense f64 kernels: thin row-major GEMM wrappers over `matrixmultiply` and
//! the conv2d / transposed-conv forward and backward passes built on them.
//!
//! Convolution here is cross-correlation (no kernel flip), zero padding,
//! `out = (in + 2*pad - k) / stride + 1` (floor). The backward functions
//! return gradients for both the input and the kernel.
//!
//! Batch samples are independent, so forward/backward parallelize over the
//! batch with rayon; per-sample summation order is fixed, which keeps results
//! independent of thread count.

use rayon::prelude::*;

/// C(m×n) = A(m×k) · B(k×n), all row-major.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if m == 0 || k == 0 || n == 0 {
        return c;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C(m×n) = A(m×k) · B(n×k)ᵀ, all row-major.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    if m == 0 || k == 0 || n == 0 {
        return c;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C(m×n) = A(k×m)ᵀ · B(k×n), all row-major.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if m == 0 || k == 0 || n == 0 {
        return c;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Static geometry of a conv2d call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }
}

/// Unfolds one sample into a (in_ch·k·k) × (out_h·out_w) patch matrix.
/// Out-of-bounds taps stay zero, which implements the zero padding.
fn im2col(sample: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    debug_assert_eq!(col.len(), g.in_ch * g.k * g.k * l);
    col.fill(0.0);
    for ci in 0..g.in_ch {
        let plane = &sample[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * l;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        col[row + oy * ow + ox] = plane[src + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the input plane.
fn col2im(col: &[f64], g: &ConvGeom, sample_grad: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for ci in 0..g.in_ch {
        let plane = &mut sample_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * l;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        plane[dst + ix as usize] += col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Forward conv2d. `input` is [B, Cin, H, W], `kernel` is [Cout, Cin, k, k];
/// returns [B, Cout, outH, outW].
pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    let ck = g.in_ch * g.k * g.k;
    let in_stride = g.in_ch * g.h * g.w;
    let out_stride = g.out_ch * l;
    debug_assert_eq!(input.len(), g.batch * in_stride);
    debug_assert_eq!(kernel.len(), g.out_ch * ck);

    let mut out = vec![0.0; g.batch * out_stride];
    out.par_chunks_mut(out_stride)
        .zip(input.par_chunks(in_stride))
        .for_each(|(out_b, in_b)| {
            let mut col = vec![0.0; ck * l];
            im2col(in_b, g, &mut col);
            let prod = matmul_nn(kernel, &col, g.out_ch, ck, l);
            out_b.copy_from_slice(&prod);
        });
    out
}

/// Backward conv2d: given the upstream gradient ([B, Cout, outH, outW]),
/// returns (grad wrt input, grad wrt kernel). The kernel gradient is reduced
/// over the batch in index order.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    let ck = g.in_ch * g.k * g.k;
    let in_stride = g.in_ch * g.h * g.w;
    let out_stride = g.out_ch * l;

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let in_b = &input[b * in_stride..(b + 1) * in_stride];
            let go_b = &grad_out[b * out_stride..(b + 1) * out_stride];
            let mut col = vec![0.0; ck * l];
            im2col(in_b, g, &mut col);
            // d/d(kernel): gout (Cout×L) · colᵀ (L×CK)
            let gk = matmul_nt(go_b, &col, g.out_ch, l, ck);
            // d/d(col): kernelᵀ (CK×Cout) · gout (Cout×L), then fold back.
            let gcol = matmul_tn(kernel, go_b, ck, g.out_ch, l);
            let mut gin = vec![0.0; in_stride];
            col2im(&gcol, g, &mut gin);
            (gin, gk)
        })
        .collect();

    let mut grad_in = vec![0.0; input.len()];
    let mut grad_kernel = vec![0.0; kernel.len()];
    for (b, (gin, gk)) in per_sample.into_iter().enumerate() {
        grad_in[b * in_stride..(b + 1) * in_stride].copy_from_slice(&gin);
        for (acc, v) in grad_kernel.iter_mut().zip(&gk) {
            *acc += v;
        }
    }
    (grad_in, grad_kernel)
}

/// Static geometry of a transposed conv2d call (no padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) * self.stride + self.k
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) * self.stride + self.k
    }
}

/// Forward transposed conv (fractionally-strided scatter). `input` is
/// [B, Cin, H, W], `kernel` is [Cin, Cout, k, k]; returns [B, Cout, outH, outW].
pub fn convt2d_forward(input: &[f64], kernel: &[f64], g: &ConvTGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_stride = g.in_ch * g.h * g.w;
    let out_stride = g.out_ch * oh * ow;
    debug_assert_eq!(input.len(), g.batch * in_stride);
    debug_assert_eq!(kernel.len(), g.in_ch * g.out_ch * g.k * g.k);

    let mut out = vec![0.0; g.batch * out_stride];
    out.par_chunks_mut(out_stride)
        .zip(input.par_chunks(in_stride))
        .for_each(|(out_b, in_b)| {
            for ci in 0..g.in_ch {
                let plane = &in_b[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for co in 0..g.out_ch {
                    let kbase = (ci * g.out_ch + co) * g.k * g.k;
                    let obase = co * oh * ow;
                    for iy in 0..g.h {
                        for ix in 0..g.w {
                            let v = plane[iy * g.w + ix];
                            if v == 0.0 {
                                continue;
                            }
                            for ky in 0..g.k {
                                let oy = iy * g.stride + ky;
                                let orow = obase + oy * ow + ix * g.stride;
                                for kx in 0..g.k {
                                    out_b[orow + kx] += v * kernel[kbase + ky * g.k + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Backward transposed conv: returns (grad wrt input, grad wrt kernel).
pub fn convt2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvTGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_stride = g.in_ch * g.h * g.w;
    let out_stride = g.out_ch * oh * ow;

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let in_b = &input[b * in_stride..(b + 1) * in_stride];
            let go_b = &grad_out[b * out_stride..(b + 1) * out_stride];
            let mut gin = vec![0.0; in_stride];
            let mut gk = vec![0.0; kernel.len()];
            for ci in 0..g.in_ch {
                for co in 0..g.out_ch {
                    let kbase = (ci * g.out_ch + co) * g.k * g.k;
                    let obase = co * oh * ow;
                    for iy in 0..g.h {
                        for ix in 0..g.w {
                            let iidx = ci * g.h * g.w + iy * g.w + ix;
                            let v = in_b[iidx];
                            let mut acc = 0.0;
                            for ky in 0..g.k {
                                let orow = obase + (iy * g.stride + ky) * ow + ix * g.stride;
                                for kx in 0..g.k {
                                    let go = go_b[orow + kx];
                                    acc += go * kernel[kbase + ky * g.k + kx];
                                    gk[kbase + ky * g.k + kx] += go * v;
                                }
                            }
                            gin[iidx] += acc;
                        }
                    }
                }
            }
            (gin, gk)
        })
        .collect();

    let mut grad_in = vec![0.0; input.len()];
    let mut grad_kernel = vec![0.0; kernel.len()];
    for (b, (gin, gk)) in per_sample.into_iter().enumerate() {
        grad_in[b * in_stride..(b + 1) * in_stride].copy_from_slice(&gin);
        for (acc, v) in grad_kernel.iter_mut().zip(&gk) {
            *acc += v;
        }
    }
    (grad_in, grad_kernel)
}
