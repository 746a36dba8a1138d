//! Raw slice kernels shared by the tape's forward and backward rules.
//!
//! Everything here works on flat row-major buffers and knows nothing about
//! the tape. Reductions and matmul inner loops accumulate in f64.

use super::Real;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::ZERO; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::ZERO {
                continue;
            }
            let aip = aip.to_f64();
            let brow = &b[p * n..(p + 1) * n];
            for (acc_j, &bpj) in acc.iter_mut().zip(brow) {
                *acc_j += aip * bpj.to_f64();
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::from_f64(v);
        }
    }
    out
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a 3×3, padding-1 convolution.
pub fn conv_out_dim(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

/// Unfolds a `c×h×w` image into `(c·9)×(ho·wo)` columns for a 3×3 kernel
/// with padding 1.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, stride: usize) -> Vec<T> {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    let cols_n = ho * wo;
    let mut cols = vec![T::ZERO; c * 9 * cols_n];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * cols_n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, stride: usize) -> Vec<T> {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    let cols_n = ho * wo;
    let mut x = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * cols_n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[ch * h * w + iy * w + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// 3×3 cross-correlation with padding 1. `kernels` is `c_out×c_in×3×3`.
pub fn conv2d<T: Real>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    c_out: usize,
    stride: usize,
) -> Vec<T> {
    let cols = im2col(x, c_in, h, w, stride);
    let n = conv_out_dim(h, stride) * conv_out_dim(w, stride);
    matmul(kernels, &cols, c_out, c_in * 9, n)
}

/// Row-wise numerically stable softmax over the last axis.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    let mut e = vec![0.0f64; cols];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for (ej, &v) in e.iter_mut().zip(row) {
            *ej = (v.to_f64() - max).exp();
            sum += *ej;
        }
        for (o, &ej) in orow.iter_mut().zip(&e) {
            *o = T::from_f64(ej / sum);
        }
    }
    out
}

/// Per-row mean and reciprocal standard deviation.
pub fn row_stats<T: Real>(x: &[T], cols: usize, eps: f32) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks(cols) {
        let mu = row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v.to_f64() - mu).powi(2)).sum::<f64>() / cols as f64;
        mean.push(mu);
        rstd.push(1.0 / (var + eps as f64).sqrt());
    }
    (mean, rstd)
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn gelu<T: Real>(x: T) -> T {
    let x = x.to_f64();
    T::from_f64(0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2)))
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.to_f64();
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::from_f64(cdf + x * pdf)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::ZERO) + (-x.abs()).exp().ln_1p()
}

/// Nearest-neighbour ×2 upsampling of a `c×h×w` image.
pub fn upsample2x<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[ch * h2 * w2 + y * w2 + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub fn upsample2x_adjoint<T: Real>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[ch * h * w + (y / 2) * w + xx / 2] += g[ch * h2 * w2 + y * w2 + xx];
            }
        }
    }
    out
}

/// Index of the source element for each output element of a depth-to-space
/// rearrangement `(c·r²)×h×w → c×(h·r)×(w·r)`.
pub fn depth_to_space_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let src_c = ch * r * r + (y % r) * r + (x % r);
                idx.push(src_c * h * w + (y / r) * w + x / r);
            }
        }
    }
    idx
}
