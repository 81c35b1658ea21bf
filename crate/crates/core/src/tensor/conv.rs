//! im2col based 2-D convolution kernels.

use super::{gemm, Float};
use crate::error::{Error, Result};

/// Geometry of a square-kernel convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
            )));
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c_in} channels, weight expects {wc}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!(
                "conv2d needs a square kernel, got {kh}x{kw}"
            )));
        }
        let h_out = conv_output_size(h, kh, stride, pad)?;
        let w_out = conv_output_size(w, kw, stride, pad)?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// `floor((size + 2·pad − k) / stride) + 1`.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("conv2d stride must be at least 1".into()));
    }
    if k == 0 || k > size + 2 * pad {
        return Err(Error::Shape(format!(
            "kernel {k} does not fit input {size} with padding {pad}"
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

/// Unfolds one image `[C_in,H,W]` into `[C_in·k·k, H_out·W_out]`.
fn im2col<T: Float>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Float>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output `[N,C_out,H_out,W_out]` data and the
/// unfolded patches of every image, which the backward pass reuses.
pub(crate) fn conv_forward<T: Float>(g: &ConvGeom, input: &[T], weight: &[T]) -> (Vec<T>, Vec<T>) {
    let pl = g.patch_len();
    let p = g.out_pixels();
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut cols = vec![T::ZERO; g.n * pl * p];
    let mut out = vec![T::ZERO; g.n * out_sz];
    for i in 0..g.n {
        let c = &mut cols[i * pl * p..(i + 1) * pl * p];
        im2col(g, &input[i * in_sz..(i + 1) * in_sz], c);
        gemm(
            g.c_out,
            pl,
            p,
            weight,
            false,
            c,
            false,
            &mut out[i * out_sz..(i + 1) * out_sz],
            false,
        );
    }
    (out, cols)
}

/// Backward pass: gradient w.r.t. the weight, and optionally w.r.t. the input.
pub(crate) fn conv_backward<T: Float>(
    g: &ConvGeom,
    cols: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let pl = g.patch_len();
    let p = g.out_pixels();
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut dw = vec![T::ZERO; g.c_out * pl];
    let mut dx = want_input.then(|| vec![T::ZERO; g.n * in_sz]);
    let mut dcols = if want_input {
        vec![T::ZERO; pl * p]
    } else {
        Vec::new()
    };
    for i in 0..g.n {
        let dy = &grad_out[i * out_sz..(i + 1) * out_sz];
        let c = &cols[i * pl * p..(i + 1) * pl * p];
        gemm(g.c_out, p, pl, dy, false, c, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            gemm(pl, g.c_out, p, weight, true, dy, false, &mut dcols, false);
            col2im(g, &dcols, &mut dx[i * in_sz..(i + 1) * in_sz]);
        }
    }
    (dw, dx)
}
