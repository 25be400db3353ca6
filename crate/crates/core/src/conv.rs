//! im2col convolution kernels on single NCHW samples.
//!
//! Every routine works on one sample's `[C, H, W]` plane stack; the autograd
//! layer loops over the batch in a fixed order so reductions are reproducible.

use crate::scalar::Scalar;

/// Geometry of a square-kernel convolution from an `in_h x in_w` plane to an
/// `out_h x out_w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output size of a forward convolution; `None` when the kernel does not fit.
    pub fn forward(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = in_h + 2 * pad;
        let pw = in_w + 2 * pad;
        if kernel == 0 || stride == 0 || ph < kernel || pw < kernel {
            return None;
        }
        Some(Self {
            in_h,
            in_w,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry of the convolution whose adjoint is a transposed convolution
    /// taking `in_h x in_w` to `(in - 1) * stride - 2 * pad + kernel`.
    pub fn transposed(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let oh = ((in_h as isize - 1) * stride as isize - 2 * pad as isize + kernel as isize).max(0) as usize;
        let ow = ((in_w as isize - 1) * stride as isize - 2 * pad as isize + kernel as isize).max(0) as usize;
        let g = Self::forward(oh, ow, kernel, stride, pad)?;
        (g.out_h == in_h && g.out_w == in_w).then_some(g)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output columns whose input column `ox * stride + kx - pad`
    /// lands inside the plane.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kx = kx as isize;
        let lo = ((p - kx).max(0) + s - 1) / s;
        let hi = ((self.in_w as isize - 1 + p - kx).div_euclid(s) + 1).clamp(0, self.out_w as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

/// Unfolds `[c, in_h, in_w]` into `[c * k * k, out_h * out_w]`.
pub fn im2col<T: Scalar>(input: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.in_h * g.in_w;
    let ol = g.out_len();
    debug_assert_eq!(cols.len(), channels * k * k * ol);
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ol;
                let dst = &mut cols[row..row + ol];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        line[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            line[ox] = srow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `[c * k * k, out_h * out_w]` into
/// `[c, in_h, in_w]`.
pub fn col2im_add<T: Scalar>(cols: &[T], channels: usize, g: &ConvGeom, out: &mut [T]) {
    let k = g.kernel;
    let plane = g.in_h * g.in_w;
    let ol = g.out_len();
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ol;
                let src = &cols[row..row + ol];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in lo..hi {
                        drow[ox * g.stride + kx - g.pad] += line[ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution of one sample. `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    c_out: usize,
    g: &ConvGeom,
    scratch: &mut Vec<T>,
    out: &mut [T],
) {
    let kk = c_in * g.kernel * g.kernel;
    let ol = g.out_len();
    fill_bias(out, bias, c_out, ol);
    if use_direct(g, c_out) {
        direct_pass(g, c_in, c_out, |co, ci, tap, oy, iy, lo, hi, shift| {
            let w = weight[(co * c_in + ci) * g.kernel * g.kernel + tap];
            let src = &input[(ci * g.in_h + iy) * g.in_w + lo + shift - g.pad..][..hi - lo];
            let dst = &mut out[(co * g.out_h + oy) * g.out_w + lo..][..hi - lo];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        });
        return;
    }
    let cols: &[T] = if g.is_pointwise() {
        input
    } else {
        scratch.resize(kk * ol, T::zero());
        im2col(input, c_in, g, scratch);
        scratch
    };
    T::gemm(c_out, kk, ol, T::one(), weight, kk as isize, 1, cols, ol as isize, 1, T::one(), out, ol as isize, 1);
}

/// Backward of [`conv2d_forward`] for one sample; gradients accumulate.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    c_in: usize,
    c_out: usize,
    g: &ConvGeom,
    scratch: &mut Vec<T>,
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let kk = c_in * g.kernel * g.kernel;
    let ol = g.out_len();
    if let Some(gb) = grad_bias {
        accumulate_bias(gb, grad_out, c_out, ol);
    }
    if use_direct(g, c_out) {
        let taps = g.kernel * g.kernel;
        if let Some(gw) = grad_weight {
            direct_pass(g, c_in, c_out, |co, ci, tap, oy, iy, lo, hi, shift| {
                let src = &input[(ci * g.in_h + iy) * g.in_w + lo + shift - g.pad..][..hi - lo];
                let dy = &grad_out[(co * g.out_h + oy) * g.out_w + lo..][..hi - lo];
                gw[(co * c_in + ci) * taps + tap] += dy.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
            });
        }
        if let Some(gx) = grad_input {
            direct_pass(g, c_in, c_out, |co, ci, tap, oy, iy, lo, hi, shift| {
                let w = weight[(co * c_in + ci) * taps + tap];
                let dy = &grad_out[(co * g.out_h + oy) * g.out_w + lo..][..hi - lo];
                let dst = &mut gx[(ci * g.in_h + iy) * g.in_w + lo + shift - g.pad..][..hi - lo];
                for (d, &s) in dst.iter_mut().zip(dy) {
                    *d += w * s;
                }
            });
        }
        return;
    }
    if let Some(gw) = grad_weight {
        let cols: &[T] = if g.is_pointwise() {
            input
        } else {
            scratch.resize(kk * ol, T::zero());
            im2col(input, c_in, g, scratch);
            scratch
        };
        // dW[c_out, kk] += dY[c_out, ol] * cols^T
        T::gemm(c_out, ol, kk, T::one(), grad_out, ol as isize, 1, cols, 1, ol as isize, T::one(), gw, kk as isize, 1);
    }
    if let Some(gx) = grad_input {
        if g.is_pointwise() {
            T::gemm(kk, c_out, ol, T::one(), weight, 1, kk as isize, grad_out, ol as isize, 1, T::one(), gx, ol as isize, 1);
        } else {
            scratch.clear();
            scratch.resize(kk * ol, T::zero());
            // dcols[kk, ol] = W^T * dY
            T::gemm(kk, c_out, ol, T::one(), weight, 1, kk as isize, grad_out, ol as isize, 1, T::zero(), scratch, ol as isize, 1);
            col2im_add(scratch, c_in, g, gx);
        }
    }
}

/// Transposed convolution of one sample. `weight` is `[c_in, c_out, k, k]`;
/// `g` is the geometry of the adjoint forward convolution (its input is our
/// output).
pub fn conv_transpose2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    c_out: usize,
    g: &ConvGeom,
    scratch: &mut Vec<T>,
    out: &mut [T],
) {
    let kk = c_out * g.kernel * g.kernel;
    let il = g.out_h * g.out_w;
    scratch.clear();
    scratch.resize(kk * il, T::zero());
    // cols[kk, il] = W^T * x
    T::gemm(kk, c_in, il, T::one(), weight, 1, kk as isize, input, il as isize, 1, T::zero(), scratch, il as isize, 1);
    fill_bias(out, bias, c_out, g.in_h * g.in_w);
    col2im_add(scratch, c_out, g, out);
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    c_in: usize,
    c_out: usize,
    g: &ConvGeom,
    scratch: &mut Vec<T>,
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let kk = c_out * g.kernel * g.kernel;
    let il = g.out_h * g.out_w;
    if let Some(gb) = grad_bias {
        accumulate_bias(gb, grad_out, c_out, g.in_h * g.in_w);
    }
    if grad_input.is_none() && grad_weight.is_none() {
        return;
    }
    scratch.resize(kk * il, T::zero());
    im2col(grad_out, c_out, g, scratch);
    if let Some(gx) = grad_input {
        // dx[c_in, il] += W[c_in, kk] * dcols
        T::gemm(c_in, kk, il, T::one(), weight, kk as isize, 1, scratch, il as isize, 1, T::one(), gx, il as isize, 1);
    }
    if let Some(gw) = grad_weight {
        // dW[c_in, kk] += x[c_in, il] * dcols^T
        T::gemm(c_in, il, kk, T::one(), input, il as isize, 1, scratch, 1, il as isize, T::one(), gw, kk as isize, 1);
    }
}

/// Stride-1 convolutions with very few channel pairs run faster as shifted
/// row updates than through im2col and a degenerate matrix product.
fn use_direct(g: &ConvGeom, c_out: usize) -> bool {
    g.stride == 1 && c_out <= 2 && !g.is_pointwise()
}

/// Visits every (output channel, input channel, tap, output row) with the
/// input row and the valid output column range `lo..hi`; the input column of
/// output column `ox` is `ox + shift - pad`.
#[inline]
fn direct_pass(
    g: &ConvGeom,
    c_in: usize,
    c_out: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize),
) {
    let k = g.kernel;
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = g.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.out_h {
                        let iy = oy as isize + ky as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        f(co, ci, ky * k + kx, oy, iy as usize, lo, hi, kx);
                    }
                }
            }
        }
    }
}

fn fill_bias<T: Scalar>(out: &mut [T], bias: Option<&[T]>, channels: usize, plane: usize) {
    match bias {
        Some(b) => {
            for c in 0..channels {
                out[c * plane..(c + 1) * plane].fill(b[c]);
            }
        }
        None => out.fill(T::zero()),
    }
}

fn accumulate_bias<T: Scalar>(gb: &mut [T], grad_out: &[T], channels: usize, plane: usize) {
    for c in 0..channels {
        gb[c] += grad_out[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}
