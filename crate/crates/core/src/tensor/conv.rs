//! Spatial kernels shared by the tape ops: im2col/col2im for convolution and
//! the separable factor-2 bicubic resampling passes.

use crate::scalar::Scalar;

/// Output spatial extent of a convolution, or `None` when the stride does
/// not divide evenly.
pub fn conv_out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_dim + 2 * pad;
    if padded < k {
        return None;
    }
    let span = padded - k;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

/// Expands one image `[C, H, W]` into columns `[C*k*k, out_h*out_w]`.
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), c * k * k * out_h * out_w);
    let n = out_h * out_w;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * out_w..][..out_w];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..][..w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let n = out_h * out_w;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * out_w..][..out_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

// Factor-2 cubic-convolution resampling, kernel coefficient a = -0.5,
// half-pixel output centres, edge-clamped sampling. Output sample 2m sits
// at source coordinate m - 0.25, sample 2m+1 at m + 0.25, giving two fixed
// four-tap stencils. Taps are exact dyadic rationals.
pub const BICUBIC_EVEN: [(isize, f64); 4] = [
    (-2, -0.0234375),
    (-1, 0.2265625),
    (0, 0.8671875),
    (1, -0.0703125),
];
pub const BICUBIC_ODD: [(isize, f64); 4] = [
    (-1, -0.0703125),
    (0, 0.8671875),
    (1, 0.2265625),
    (2, -0.0234375),
];

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Upsamples the row direction: `[h, w] -> [h, 2w]`.
pub fn upsample2_rows<T: Scalar>(src: &[T], h: usize, w: usize, dst: &mut [T]) {
    for y in 0..h {
        let s = &src[y * w..][..w];
        let d = &mut dst[y * 2 * w..][..2 * w];
        for m in 0..w {
            let mut even = T::zero();
            let mut odd = T::zero();
            for (off, wt) in BICUBIC_EVEN {
                even = even + T::from_f64(wt) * s[clamp_idx(m as isize + off, w)];
            }
            for (off, wt) in BICUBIC_ODD {
                odd = odd + T::from_f64(wt) * s[clamp_idx(m as isize + off, w)];
            }
            d[2 * m] = even;
            d[2 * m + 1] = odd;
        }
    }
}

/// Upsamples the column direction: `[h, w] -> [2h, w]`.
pub fn upsample2_cols<T: Scalar>(src: &[T], h: usize, w: usize, dst: &mut [T]) {
    for m in 0..h {
        for (parity, taps) in [(0, &BICUBIC_EVEN), (1, &BICUBIC_ODD)] {
            let d = &mut dst[(2 * m + parity) * w..][..w];
            for v in d.iter_mut() {
                *v = T::zero();
            }
            for &(off, wt) in taps.iter() {
                let s = &src[clamp_idx(m as isize + off, h) * w..][..w];
                let wt = T::from_f64(wt);
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv = *dv + wt * sv;
                }
            }
        }
    }
}

/// Adjoint of [`upsample2_rows`]: `[h, 2w] -> [h, w]`, accumulating.
pub fn upsample2_rows_adjoint<T: Scalar>(gout: &[T], h: usize, w: usize, gsrc: &mut [T]) {
    for y in 0..h {
        let g = &gout[y * 2 * w..][..2 * w];
        let d = &mut gsrc[y * w..][..w];
        for m in 0..w {
            for (off, wt) in BICUBIC_EVEN {
                let i = clamp_idx(m as isize + off, w);
                d[i] = d[i] + T::from_f64(wt) * g[2 * m];
            }
            for (off, wt) in BICUBIC_ODD {
                let i = clamp_idx(m as isize + off, w);
                d[i] = d[i] + T::from_f64(wt) * g[2 * m + 1];
            }
        }
    }
}

/// Adjoint of [`upsample2_cols`]: `[2h, w] -> [h, w]`, accumulating.
pub fn upsample2_cols_adjoint<T: Scalar>(gout: &[T], h: usize, w: usize, gsrc: &mut [T]) {
    for m in 0..h {
        for (parity, taps) in [(0usize, &BICUBIC_EVEN), (1, &BICUBIC_ODD)] {
            let g = &gout[(2 * m + parity) * w..][..w];
            for &(off, wt) in taps.iter() {
                let row = clamp_idx(m as isize + off, h);
                let d = &mut gsrc[row * w..][..w];
                let wt = T::from_f64(wt);
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = *dv + wt * gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dim_rejects_non_integral() {
        assert_eq!(conv_out_dim(3, 2, 1, 0), Some(2));
        assert_eq!(conv_out_dim(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_dim(5, 2, 2, 0), None);
        assert_eq!(conv_out_dim(1, 3, 1, 0), None);
    }

    #[test]
    fn bicubic_taps_partition_unity() {
        let se: f64 = BICUBIC_EVEN.iter().map(|&(_, w)| w).sum();
        let so: f64 = BICUBIC_ODD.iter().map(|&(_, w)| w).sum();
        assert_eq!(se, 1.0);
        assert_eq!(so, 1.0);
    }

    // Direct kernel-sum oracle: evaluates the a = -0.5 cubic convolution
    // kernel at arbitrary source coordinates with edge clamping.
    fn cubic_kernel(t: f64) -> f64 {
        let a = -0.5;
        let t = t.abs();
        if t <= 1.0 {
            (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
        } else if t < 2.0 {
            a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
        } else {
            0.0
        }
    }

    fn oracle_upsample2_1d(src: &[f64]) -> Vec<f64> {
        let n = src.len();
        (0..2 * n)
            .map(|i| {
                let x = (i as f64 + 0.5) / 2.0 - 0.5;
                let base = x.floor() as isize;
                (-1..=2)
                    .map(|d| {
                        let j = base + d;
                        let s = src[(j.clamp(0, n as isize - 1)) as usize];
                        s * cubic_kernel(x - j as f64)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn rows_pass_matches_kernel_sum_oracle() {
        let src = vec![0.0, 1.0];
        let mut dst = vec![0.0; 4];
        upsample2_rows(&src, 1, 2, &mut dst);
        let expect = oracle_upsample2_1d(&src);
        assert_eq!(dst, expect);
        // Frozen values from the oracle.
        assert_eq!(dst, vec![-0.0703125, 0.203125, 0.796875, 1.0703125]);

        let src = vec![0.3, -1.2, 0.7, 2.0, 0.05];
        let mut dst = vec![0.0; 10];
        upsample2_rows(&src, 1, 5, &mut dst);
        for (a, b) in dst.iter().zip(oracle_upsample2_1d(&src)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cols_pass_matches_rows_pass_on_transpose() {
        let src: Vec<f64> = (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect();
        // column-upsample a 3x4 as rows-upsample of its transpose
        let mut a = vec![0.0; 24];
        upsample2_cols(&src, 3, 4, &mut a);
        let mut tr = vec![0.0; 12];
        for y in 0..3 {
            for x in 0..4 {
                tr[x * 3 + y] = src[y * 4 + x];
            }
        }
        let mut b = vec![0.0; 24];
        upsample2_rows(&tr, 4, 3, &mut b);
        for y in 0..6 {
            for x in 0..4 {
                assert!((a[y * 4 + x] - b[x * 6 + y]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        // <U x, y> == <x, U^T y> for random x, y
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from(11, "adjoint", 0);
        let (h, w) = (3, 5);
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..h * 2 * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ux = vec![0.0; h * 2 * w];
        upsample2_rows(&x, h, w, &mut ux);
        let mut uty = vec![0.0; h * w];
        upsample2_rows_adjoint(&y, h, w, &mut uty);
        let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&uty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_col2im_adjoint_identity() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from(12, "adjoint", 1);
        let (c, h, w, k, stride, pad) = (2usize, 4usize, 5usize, 3usize, 1usize, 1usize);
        let oh = conv_out_dim(h, k, stride, pad).unwrap();
        let ow = conv_out_dim(w, k, stride, pad).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..c * k * k * oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; c * k * k * oh * ow];
        im2col(&x, c, h, w, k, stride, pad, oh, ow, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im_add(&y, c, h, w, k, stride, pad, oh, ow, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
