//! im2col / col2im kernels shared by the convolution ops.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use super::Real;

/// Output spatial size of a convolution with square kernel `k`.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "conv window {k} larger than padded input {}",
        input + 2 * pad
    );
    (input + 2 * pad - k) / stride + 1
}

/// Unfold (C,H,W) into (C*k*k, Ho*Wo) patch columns with zero padding.
pub fn im2col<T: Real>(x: ArrayView3<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<T>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add (C*k*k, Ho*Wo) columns back onto (C,H,W).
pub fn col2im<T: Real>(
    cols: ArrayView2<T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    assert_eq!(cols.dim(), (c * k * k, ho * wo), "col2im column shape");
    let mut img = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[[ci, ii as usize, jj as usize]] =
                            img[[ci, ii as usize, jj as usize]] + cols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn im2col_identity_kernel() {
        let x = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f64);
        let cols = im2col(x.view(), 1, 1, 0);
        assert_eq!(cols.dim(), (1, 9));
        for idx in 0..9 {
            assert_eq!(cols[[0, idx]], idx as f64);
        }
    }

    #[test]
    fn col2im_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish dense tensors.
        let x = Array3::from_shape_fn((2, 5, 5), |(c, i, j)| (c * 25 + i * 5 + j) as f64 * 0.1);
        let k = 3;
        let (s, p) = (2, 1);
        let cols = im2col(x.view(), k, s, p);
        let y = cols.mapv(|v| v * 0.5 + 0.25);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(y.view(), 2, 5, 5, k, s, p);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
