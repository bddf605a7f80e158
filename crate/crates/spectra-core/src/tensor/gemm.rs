//! Dense matrix kernels backing conv2d and linear layers.
//!
//! All loops keep the innermost axis contiguous (axpy form) so the compiler
//! can vectorize without reassociating float reductions; accumulation order
//! is fixed, which keeps results bit-reproducible run to run.

use crate::real::Real;

/// c[m,n] += a[m,k] · b[k,n], all row-major.
pub fn gemm_nn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// c[m,n] += aᵀ · b where a is stored row-major as [k,m] and b as [k,n].
pub fn gemm_tn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aki * bj;
            }
        }
    }
}

/// dst[cols,rows] = transpose of src[rows,cols].
pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        let s_row = &src[r * cols..(r + 1) * cols];
        for (c, &v) in s_row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// Output spatial extent of a convolution axis: (len + 2·pad − kernel)/stride + 1.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfold one sample [C,H,W] into col[C·kh·kw, OH·OW] for cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let patch = oh * ow;
    debug_assert_eq!(col.len(), channels * kh * kw * patch);
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let out_row = &mut col[row * patch..(row + 1) * patch];
                for out_i in 0..oh {
                    let in_i = (out_i * stride + ki) as isize - pad as isize;
                    let dst = &mut out_row[out_i * ow..(out_i + 1) * ow];
                    if in_i < 0 || in_i >= h as isize {
                        for d in dst.iter_mut() {
                            *d = T::ZERO;
                        }
                        continue;
                    }
                    let src_row = &plane[in_i as usize * w..(in_i as usize + 1) * w];
                    for (out_j, d) in dst.iter_mut().enumerate() {
                        let in_j = (out_j * stride + kj) as isize - pad as isize;
                        *d = if in_j < 0 || in_j >= w as isize {
                            T::ZERO
                        } else {
                            src_row[in_j as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`]: fold col gradients back onto the
/// input gradient of one sample.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Real>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let patch = oh * ow;
    debug_assert_eq!(col.len(), channels * kh * kw * patch);
    debug_assert_eq!(dx.len(), channels * h * w);
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src_row = &col[row * patch..(row + 1) * patch];
                for out_i in 0..oh {
                    let in_i = (out_i * stride + ki) as isize - pad as isize;
                    if in_i < 0 || in_i >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[in_i as usize * w..(in_i as usize + 1) * w];
                    for out_j in 0..ow {
                        let in_j = (out_j * stride + kj) as isize - pad as isize;
                        if in_j < 0 || in_j >= w as isize {
                            continue;
                        }
                        dst_row[in_j as usize] += src_row[out_i * ow + out_j];
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn gemm_nn_small() {
        // [1 2; 3 4] x [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        let mut c = vec![0.0f64; 4];
        gemm_nn_acc(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_tn_matches_nn_on_transposed_input() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [3,2] as stored
        let b = vec![1.0f64, 0.0, 2.0, 1.0, 0.0, 3.0]; // [3,2]
        // aᵀ [2,3] · b [3,2]
        let mut c_tn = vec![0.0f64; 4];
        gemm_tn_acc(2, 3, 2, &a, &b, &mut c_tn);

        let mut at = vec![0.0f64; 6];
        transpose(3, 2, &a, &mut at);
        let mut c_nn = vec![0.0f64; 4];
        gemm_nn_acc(2, 3, 2, &at, &b, &mut c_nn);
        assert_eq!(c_tn, c_nn);
    }

    #[test]
    fn im2col_identity_kernel_window() {
        // 1 channel, 3x3 input, 3x3 kernel, no pad: col is the flattened input.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut col = vec![0.0f64; 9];
        im2col(&x, 1, 3, 3, 3, 3, 1, 0, &mut col);
        assert_eq!(col, x);
    }

    #[test]
    fn col2im_inverts_im2col_counts() {
        // With stride 1 and pad 1, each input cell is visited once per kernel
        // position that covers it; folding a col of ones counts coverage.
        let x = vec![0.0f64; 16];
        let mut col = vec![0.0f64; 9 * 16];
        im2col(&vec![1.0f64; 16], 1, 4, 4, 3, 3, 1, 1, &mut col);
        let ones_col: Vec<f64> = col.iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect();
        let mut dx = x;
        col2im_acc(&ones_col, 1, 4, 4, 3, 3, 1, 1, &mut dx);
        // Corner cells are covered by 4 kernel placements, centers by 9.
        assert_eq!(dx[0], 4.0);
        assert_eq!(dx[5], 9.0);
    }
}
