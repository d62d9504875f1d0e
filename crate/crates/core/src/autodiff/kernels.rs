//! Numeric kernels behind the graph operations.
//!
//! Everything here is single-threaded and accumulates in a fixed order, so
//! results are bit-reproducible on a given build. Inner loops are written as
//! independent per-element update chains (`y[j] += a * x[j]`), which the
//! compiler can vectorise without reassociating any particular sum.

use crate::num::Real;

/// `y[j] += a * x[j]`.
#[inline]
pub fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yj, &xj) in y.iter_mut().zip(x) {
        *yj = *yj + a * xj;
    }
}

/// Dot product with eight independent accumulator lanes (fixed lane order,
/// deterministic, vectorisable).
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [F::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let pa = &a[c * 8..c * 8 + 8];
        let pb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + pa[l] * pb[l];
        }
    }
    let mut s = F::zero();
    for l in 0..8 {
        s += acc[l];
    }
    for j in chunks * 8..n {
        s += a[j] * b[j];
    }
    s
}

/// `out[M,N] = a[M,K] * b[K,N]` (row-major, overwrites `out`).
pub fn matmul<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(F::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            // Skipping exact zeros is free and pays off on one-hot inputs.
            if aik != F::zero() {
                axpy(crow, aik, &b[kk * n..(kk + 1) * n]);
            }
        }
    }
}

/// `out[C,R] = transpose(a[R,C])`.
pub fn transpose<F: Real>(a: &[F], rows: usize, cols: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Output spatial size of a strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(stride >= 1, "conv stride must be >= 1, got {stride}");
    assert!(
        input + 2 * pad >= kernel,
        "conv kernel {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of the transposed convolution that inverts
/// [`conv_out_size`] geometry.
pub fn convt_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(stride >= 1, "deconv stride must be >= 1, got {stride}");
    (input - 1) * stride + kernel - 2 * pad
}

/// Layout statement for one convolution: a single image in, im2col matrix out.
///
/// `cols` has `ci*kh*kw` rows and `ho*wo` columns; row `r = (c*kh + dy)*kw + dx`
/// holds input channel `c` offset by `(dy, dx)` for every output position.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(
    x: &[F],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [F],
) {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(cols.len(), ci * kh * kw * ho * wo);
    let positions = ho * wo;
    let mut row = 0;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    let seg = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(F::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in seg.iter_mut().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]: accumulates `cols` back into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_accumulate<F: Real>(
    cols: &[F],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [F],
) {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(cols.len(), ci * kh * kw * ho * wo);
    let positions = ho * wo;
    let mut row = 0;
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched convolution forward pass.
///
/// `x` is `[n, ci, h, w]`, `kernel` is `[co, ci, kh, kw]`, `out` is
/// `[n, co, ho, wo]` and is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<F: Real>(
    x: &[F],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kernel: &[F],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [F],
) {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let krows = ci * kh * kw;
    let positions = ho * wo;
    debug_assert_eq!(kernel.len(), co * krows);
    debug_assert_eq!(out.len(), n * co * positions);
    let mut cols = vec![F::zero(); krows * positions];
    for item in 0..n {
        let xi = &x[item * ci * h * w..(item + 1) * ci * h * w];
        im2col(xi, ci, h, w, kh, kw, stride, pad, &mut cols);
        let yi = &mut out[item * co * positions..(item + 1) * co * positions];
        matmul(kernel, co, krows, &cols, positions, yi);
    }
}

/// Gradient of the convolution with respect to its input.
///
/// `dy` is `[n, co, ho, wo]`; writes `dx` as `[n, ci, h, w]` (overwrites).
/// Also the forward pass of the transposed convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad<F: Real>(
    dy: &[F],
    n: usize,
    co: usize,
    kernel: &[F],
    ci: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
    dx: &mut [F],
) {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let krows = ci * kh * kw;
    let positions = ho * wo;
    debug_assert_eq!(dy.len(), n * co * positions);
    debug_assert_eq!(kernel.len(), co * krows);
    debug_assert_eq!(dx.len(), n * ci * h * w);
    // kt = transpose(kernel): [krows, co]
    let mut kt = vec![F::zero(); krows * co];
    transpose(kernel, co, krows, &mut kt);
    let mut dcols = vec![F::zero(); krows * positions];
    dx.fill(F::zero());
    for item in 0..n {
        let dyi = &dy[item * co * positions..(item + 1) * co * positions];
        matmul(&kt, krows, co, dyi, positions, &mut dcols);
        let dxi = &mut dx[item * ci * h * w..(item + 1) * ci * h * w];
        col2im_accumulate(&dcols, ci, h, w, kh, kw, stride, pad, dxi);
    }
}

/// Gradient of the convolution with respect to its kernel.
///
/// Accumulates into `dk` (`[co, ci, kh, kw]`, caller zeroes it first).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel_grad<F: Real>(
    x: &[F],
    dy: &[F],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dk: &mut [F],
) {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let krows = ci * kh * kw;
    let positions = ho * wo;
    debug_assert_eq!(dk.len(), co * krows);
    let mut cols = vec![F::zero(); krows * positions];
    let mut cols_t = vec![F::zero(); positions * krows];
    for item in 0..n {
        let xi = &x[item * ci * h * w..(item + 1) * ci * h * w];
        im2col(xi, ci, h, w, kh, kw, stride, pad, &mut cols);
        transpose(&cols, krows, positions, &mut cols_t);
        let dyi = &dy[item * co * positions..(item + 1) * co * positions];
        // dk[o, :] += sum_p dy[o, p] * cols_t[p, :]
        for o in 0..co {
            let dkrow = &mut dk[o * krows..(o + 1) * krows];
            let dyrow = &dyi[o * positions..(o + 1) * positions];
            for (p, &g) in dyrow.iter().enumerate() {
                if g != F::zero() {
                    axpy(dkrow, g, &cols_t[p * krows..(p + 1) * krows]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct (index-arithmetic) convolution used as an oracle for the
    /// im2col-based implementation.
    #[allow(clippy::too_many_arguments)]
    fn conv_naive(
        x: &[f64],
        n: usize,
        ci: usize,
        h: usize,
        w: usize,
        k: &[f64],
        co: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = conv_out_size(h, kh, stride, pad);
        let wo = conv_out_size(w, kw, stride, pad);
        let mut y = vec![0.0; n * co * ho * wo];
        for item in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((item * ci + c) * h + iy as usize) * w
                                        + ix as usize];
                                    let kv = k[((o * ci + c) * kh + dy) * kw + dx];
                                    acc += xv * kv;
                                }
                            }
                        }
                        y[((item * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn rand_vec(len: usize, rng: &mut crate::rng::StreamRng) -> Vec<f64> {
        (0..len).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
    }

    #[test]
    fn matmul_small_case() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, 2, 2, &b, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn dot_matches_naive_sum() {
        let mut rng = crate::rng::StreamRng::root(2).child("dot");
        for len in [1usize, 7, 8, 9, 31, 64, 100] {
            let a = rand_vec(len, &mut rng);
            let b = rand_vec(len, &mut rng);
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12, "len {len}");
        }
    }

    #[test]
    fn conv_forward_matches_naive_oracle() {
        let mut rng = crate::rng::StreamRng::root(3).child("conv");
        for &(n, ci, h, w, co, kh, kw, stride, pad) in &[
            (1usize, 1usize, 5usize, 5usize, 1usize, 3usize, 3usize, 1usize, 1usize),
            (2, 3, 6, 6, 4, 4, 4, 2, 1),
            (1, 2, 7, 5, 3, 3, 2, 2, 0),
            (2, 2, 4, 4, 2, 1, 1, 1, 0),
            (1, 1, 8, 8, 2, 4, 4, 2, 1),
        ] {
            let x = rand_vec(n * ci * h * w, &mut rng);
            let k = rand_vec(co * ci * kh * kw, &mut rng);
            let expected = conv_naive(&x, n, ci, h, w, &k, co, kh, kw, stride, pad);
            let ho = conv_out_size(h, kh, stride, pad);
            let wo = conv_out_size(w, kw, stride, pad);
            let mut got = vec![0.0; n * co * ho * wo];
            conv2d_forward(&x, n, ci, h, w, &k, co, kh, kw, stride, pad, &mut got);
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_example() {
        // 1x3x64x64 input, 16 4x4 kernels, stride 2, pad 1 -> 1x16x32x32.
        assert_eq!(conv_out_size(64, 4, 2, 1), 32);
        let x = vec![0.0f64; 3 * 64 * 64];
        let k = vec![0.0f64; 16 * 3 * 4 * 4];
        let mut y = vec![0.0f64; 16 * 32 * 32];
        conv2d_forward(&x, 1, 3, 64, 64, &k, 16, 4, 4, 2, 1, &mut y);
    }

    #[test]
    fn deconv_size_inverts_conv_size() {
        // stride-2 4x4 pad-1 doubles resolution on the way back up.
        assert_eq!(convt_out_size(32, 4, 2, 1), 64);
        assert_eq!(convt_out_size(4, 4, 2, 1), 8);
        for s in [16usize, 8, 32] {
            assert_eq!(convt_out_size(conv_out_size(s, 4, 2, 1), 4, 2, 1), s);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c — the defining
        // property that makes the conv backward pass correct.
        let mut rng = crate::rng::StreamRng::root(4).child("adj");
        let (ci, h, w, kh, kw, stride, pad) = (2usize, 5usize, 6usize, 3usize, 3usize, 2usize, 1usize);
        let ho = conv_out_size(h, kh, stride, pad);
        let wo = conv_out_size(w, kw, stride, pad);
        let x = rand_vec(ci * h * w, &mut rng);
        let c = rand_vec(ci * kh * kw * ho * wo, &mut rng);
        let mut cols = vec![0.0; c.len()];
        im2col(&x, ci, h, w, kh, kw, stride, pad, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_accumulate(&c, ci, h, w, kh, kw, stride, pad, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint identity violated");
    }
}
