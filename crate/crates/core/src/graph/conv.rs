//! Dense kernels for the floating-point graph.
//!
//! Activations are stored channel-major over the batch (`[C][N][H][W]`), so a
//! convolution is one GEMM between the `[OC, K]` weight matrix and the
//! `[K, N*OH*OW]` patch matrix, and its output is already in the same layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::ConvSpec;

/// Batch activation tensor in `[C][N][H][W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Activations {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self { channels, batch, height, width, data: vec![0.0; channels * batch * height * width] }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Values belonging to sample `n`, in `[C][H][W]` order.
    pub fn sample(&self, n: usize) -> Vec<f64> {
        let plane = self.plane();
        let mut out = Vec::with_capacity(self.channels * plane);
        for c in 0..self.channels {
            let start = (c * self.batch + n) * plane;
            out.extend_from_slice(&self.data[start..start + plane]);
        }
        out
    }
}

/// Output spatial size of `conv` applied to an `h x w` input.
pub fn output_hw(conv: &ConvSpec, h: usize, w: usize) -> Option<(usize, usize)> {
    let (kh, kw) = conv.kernel;
    let (sh, sw) = conv.stride;
    let (ph, pw) = conv.padding;
    let hp = h + 2 * ph;
    let wp = w + 2 * pw;
    if hp < kh || wp < kw || sh == 0 || sw == 0 {
        return None;
    }
    Some(((hp - kh) / sh + 1, (wp - kw) / sw + 1))
}

/// Patch matrix `[K, N*OH*OW]` with `K = (c, ky, kx)`; padded taps read `pad`.
pub fn im2col(x: &Activations, conv: &ConvSpec, pad: f64) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = output_hw(conv, x.height, x.width).expect("geometry validated by ModelSpec");
    let (kh, kw) = conv.kernel;
    let (sh, sw) = conv.stride;
    let (ph, pw) = conv.padding;
    let cols = x.batch * oh * ow;
    let k = x.channels * kh * kw;
    let mut out = vec![pad; k * cols];
    for c in 0..x.channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..x.batch {
                    let src = &x.data[(c * x.batch + n) * x.plane()..][..x.plane()];
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.width..][..x.width];
                        let base = (n * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Scatter-add a patch-matrix gradient back onto the input layout.
pub fn col2im(dcol: &[f64], conv: &ConvSpec, channels: usize, batch: usize, h: usize, w: usize) -> Activations {
    let (oh, ow) = output_hw(conv, h, w).expect("geometry validated by ModelSpec");
    let (kh, kw) = conv.kernel;
    let (sh, sw) = conv.stride;
    let (ph, pw) = conv.padding;
    let cols = batch * oh * ow;
    let mut dx = Activations::zeros(channels, batch, h, w);
    let plane = h * w;
    for c in 0..channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &dcol[row * cols..(row + 1) * cols];
                for n in 0..batch {
                    let dst = &mut dx.data[(c * batch + n) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (n * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `c = a * b` for row-major `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), &mut c).expect("out shape");
    general_mat_mul(1.0, &av, &bv, 0.0, &mut cv);
    c
}

/// `c = a * b^T` for row-major `a: [m, k]`, `b: [n, k]`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((n, k), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), &mut c).expect("out shape");
    general_mat_mul(1.0, &av, &bv.t(), 0.0, &mut cv);
    c
}

/// `c = a^T * b` for row-major `a: [k, m]`, `b: [k, n]`.
pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let av = ArrayView2::from_shape((k, m), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), &mut c).expect("out shape");
    general_mat_mul(1.0, &av.t(), &bv, 0.0, &mut cv);
    c
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
