//! 2-D convolution kernels on NCHW data (im2col followed by a GEMM).
//!
//! `conv_forward` is cross-correlation with zero padding. The two backward
//! maps are its exact adjoints; `conv_backward_input` doubles as the forward
//! pass of the transposed convolution.

use crate::error::{shape, Result};

use super::Scalar;

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return shape("kernel and stride must be at least 1");
    }
    if input + 2 * padding < kernel {
        return shape(format!("kernel {kernel} larger than padded input {}", input + 2 * padding));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return shape("kernel, stride and input must be at least 1");
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return shape(format!("padding {padding} consumes the whole output"));
    }
    Ok(full - 2 * padding)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Range of output positions `o` whose input tap `o*stride + k - padding`
    /// lies inside `0..len`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
        let hi = (len as isize - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds item `n` of `x` into `cols` (`C·k·k` rows × `OH·OW` columns).
    fn im2col<T: Scalar>(&self, x: &[T], n: usize, cols: &mut [T]) {
        let (k, ih, iw, ow_n, p) = (self.kernel, self.in_h, self.in_w, self.out_w, self.out_plane());
        cols.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.in_ch {
            let xb = &x[(n * self.in_ch + c) * ih * iw..][..ih * iw];
            for kh in 0..k {
                let (oh0, oh1) = self.valid(kh, ih, self.out_h);
                for kw in 0..k {
                    let (ow0, ow1) = self.valid(kw, iw, ow_n);
                    let row = &mut cols[((c * k + kh) * k + kw) * p..][..p];
                    for oh in oh0..oh1 {
                        let xr = &xb[(oh * self.stride + kh - self.padding) * iw..][..iw];
                        for ow in ow0..ow1 {
                            row[oh * ow_n + ow] = xr[ow * self.stride + kw - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates `cols` into item `n` of `x`.
    fn col2im<T: Scalar>(&self, cols: &[T], n: usize, x: &mut [T]) {
        let (k, ih, iw, ow_n, p) = (self.kernel, self.in_h, self.in_w, self.out_w, self.out_plane());
        for c in 0..self.in_ch {
            let xb = &mut x[(n * self.in_ch + c) * ih * iw..][..ih * iw];
            for kh in 0..k {
                let (oh0, oh1) = self.valid(kh, ih, self.out_h);
                for kw in 0..k {
                    let (ow0, ow1) = self.valid(kw, iw, ow_n);
                    let row = &cols[((c * k + kh) * k + kw) * p..][..p];
                    for oh in oh0..oh1 {
                        let xr = &mut xb[(oh * self.stride + kh - self.padding) * iw..][..iw];
                        for ow in ow0..ow1 {
                            xr[ow * self.stride + kw - self.padding] += row[oh * ow_n + ow];
                        }
                    }
                }
            }
        }
    }
}

/// y[n,o,oh,ow] += Σ w[o,c,kh,kw] · x[n,c,oh·s+kh-p, ow·s+kw-p]
pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]) {
    let (rows, p, o) = (g.col_rows(), g.out_plane(), g.out_ch);
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..g.batch {
        g.im2col(x, n, &mut cols);
        T::gemm(o, rows, p, w, (rows, 1), &cols, (p, 1), T::one(), &mut y[n * o * p..][..o * p], p);
    }
}

/// Adjoint of [`conv_forward`] w.r.t. x: gx[n,c,ih,iw] += w[o,c,kh,kw]·gy[n,o,oh,ow].
pub(crate) fn conv_backward_input<T: Scalar>(g: &ConvGeom, gy: &[T], w: &[T], gx: &mut [T]) {
    let (rows, p, o) = (g.col_rows(), g.out_plane(), g.out_ch);
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..g.batch {
        T::gemm(rows, o, p, w, (1, rows), &gy[n * o * p..][..o * p], (p, 1), T::zero(), &mut cols, p);
        g.col2im(&cols, n, gx);
    }
}

/// Gradient w.r.t. the kernel: gw[o,c,kh,kw] += Σ gy[n,o,oh,ow]·x[n,c,ih,iw].
pub(crate) fn conv_backward_weight<T: Scalar>(g: &ConvGeom, x: &[T], gy: &[T], gw: &mut [T]) {
    let (rows, p, o) = (g.col_rows(), g.out_plane(), g.out_ch);
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..g.batch {
        g.im2col(x, n, &mut cols);
        T::gemm(o, p, rows, &gy[n * o * p..][..o * p], (p, 1), &cols, (1, p), T::one(), gw, rows);
    }
}
