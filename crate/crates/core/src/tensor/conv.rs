//! im2col-based 2-D convolution and its transpose.
//!
//! Convention: cross-correlation, kernels `[out, in, k, k]` for `conv2d`
//! and `[in, out, k, k]` for `deconv2d`, so that `deconv2d` with kernel `K`
//! is exactly the input-adjoint of `conv2d` with the same `K`.

use super::Scalar;
use crate::error::{dim_err, Result};

/// Output extent of a strided convolution, or `None` if the kernel does not fit.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < k {
        return None;
    }
    Some((input + 2 * pad - k) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn deconv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + k;
    if full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    /// Channels, height, width of the "image" side (conv input / deconv output).
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spatial extent of the "column" side (conv output / deconv input).
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `image` (`[c, h, w]`) into `cols` (`[c·k·k, oh·ow]`).
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    let (pad, stride) = (g.pad as isize, g.stride as isize);
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * stride + ky as isize - pad;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &image[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * stride + kx as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `cols` back onto `image`, accumulating overlapping entries.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geometry, image: &mut [T]) {
    let ncols = g.cols();
    let (pad, stride) = (g.pad as isize, g.stride as isize);
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shape bookkeeping shared by the forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    /// Channels on the column side (conv output / deconv input).
    pub m: usize,
    pub geom: Geometry,
}

pub(crate) fn conv_dims(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(ConvDims, Vec<usize>)> {
    if input.len() != 4 || kernel.len() != 4 {
        return dim_err(format!("conv2d expects [N,C,H,W] input and 4-d kernel, got {input:?} and {kernel:?}"));
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kc != c || kh != kw {
        return dim_err(format!("kernel {kernel:?} incompatible with input {input:?}"));
    }
    let (Some(oh), Some(ow)) = (
        conv_out_extent(h, kh, stride, pad),
        conv_out_extent(w, kw, stride, pad),
    ) else {
        return dim_err(format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad}, stride {stride})"));
    };
    let geom = Geometry { c, h, w, k: kh, stride, pad, oh, ow };
    Ok((ConvDims { batch: n, m: o, geom }, vec![n, o, oh, ow]))
}

pub(crate) fn deconv_dims(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(ConvDims, Vec<usize>)> {
    if input.len() != 4 || kernel.len() != 4 {
        return dim_err(format!("deconv2d expects [N,C,H,W] input and 4-d kernel, got {input:?} and {kernel:?}"));
    }
    let (n, ci, h, w) = (input[0], input[1], input[2], input[3]);
    let (kci, co, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kci != ci || kh != kw {
        return dim_err(format!("kernel {kernel:?} incompatible with input {input:?}"));
    }
    let (Some(oh), Some(ow)) = (
        deconv_out_extent(h, kh, stride, pad),
        deconv_out_extent(w, kw, stride, pad),
    ) else {
        return dim_err(format!("deconv2d of {h}x{w} with k={kh} stride={stride} pad={pad} is empty"));
    };
    if conv_out_extent(oh, kh, stride, pad) != Some(h) || conv_out_extent(ow, kw, stride, pad) != Some(w) {
        return dim_err(format!("deconv2d geometry {h}x{w} -> {oh}x{ow} is not invertible"));
    }
    let geom = Geometry { c: co, h: oh, w: ow, k: kh, stride, pad, oh: h, ow: w };
    Ok((ConvDims { batch: n, m: ci, geom }, vec![n, co, oh, ow]))
}

/// `y[n] = K[m, rows] · im2col(x[n])`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], kernel: &[T], d: &ConvDims) -> Vec<T> {
    let g = &d.geom;
    let (rows, ncols) = (g.rows(), g.cols());
    let in_size = g.c * g.h * g.w;
    let out_size = d.m * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); d.batch * out_size];
    for n in 0..d.batch {
        im2col(&x[n * in_size..(n + 1) * in_size], g, &mut cols);
        T::gemm(
            d.m, rows, ncols,
            kernel, rows as isize, 1,
            &cols, ncols as isize, 1,
            T::zero(),
            &mut out[n * out_size..(n + 1) * out_size], ncols as isize, 1,
        );
    }
    out
}

/// Gradients of [`conv_forward`] w.r.t. its input and kernel.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    d: &ConvDims,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let g = &d.geom;
    let (rows, ncols) = (g.rows(), g.cols());
    let in_size = g.c * g.h * g.w;
    let out_size = d.m * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![T::zero(); kernel.len()]);
    for n in 0..d.batch {
        let dyn_ = &dy[n * out_size..(n + 1) * out_size];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[n * in_size..(n + 1) * in_size], g, &mut cols);
            // dK += dY[m, ncols] · cols^T
            T::gemm(
                d.m, ncols, rows,
                dyn_, ncols as isize, 1,
                &cols, 1, ncols as isize,
                T::one(),
                dk, rows as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T · dY
            T::gemm(
                rows, d.m, ncols,
                kernel, 1, rows as isize,
                dyn_, ncols as isize, 1,
                T::zero(),
                &mut cols, ncols as isize, 1,
            );
            col2im(&cols, g, &mut dx[n * in_size..(n + 1) * in_size]);
        }
    }
    (dx, dk)
}

/// `y[n] = col2im(K^T · x[n])`: the input-adjoint of [`conv_forward`].
pub(crate) fn deconv_forward<T: Scalar>(x: &[T], kernel: &[T], d: &ConvDims) -> Vec<T> {
    let g = &d.geom;
    let (rows, ncols) = (g.rows(), g.cols());
    let in_size = d.m * ncols;
    let out_size = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); d.batch * out_size];
    for n in 0..d.batch {
        T::gemm(
            rows, d.m, ncols,
            kernel, 1, rows as isize,
            &x[n * in_size..(n + 1) * in_size], ncols as isize, 1,
            T::zero(),
            &mut cols, ncols as isize, 1,
        );
        col2im(&cols, g, &mut out[n * out_size..(n + 1) * out_size]);
    }
    out
}

pub(crate) fn deconv_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    d: &ConvDims,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let g = &d.geom;
    let (rows, ncols) = (g.rows(), g.cols());
    let in_size = d.m * ncols;
    let out_size = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![T::zero(); kernel.len()]);
    for n in 0..d.batch {
        im2col(&dy[n * out_size..(n + 1) * out_size], g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                d.m, rows, ncols,
                kernel, rows as isize, 1,
                &cols, ncols as isize, 1,
                T::zero(),
                &mut dx[n * in_size..(n + 1) * in_size], ncols as isize, 1,
            );
        }
        if let Some(dk) = dk.as_mut() {
            // dK[m, rows] += x[n][m, ncols] · cols^T
            T::gemm(
                d.m, ncols, rows,
                &x[n * in_size..(n + 1) * in_size], ncols as isize, 1,
                &cols, 1, ncols as isize,
                T::one(),
                dk, rows as isize, 1,
            );
        }
    }
    (dx, dk)
}
