//! Convolution kernels: im2col + GEMM forward pass and the matching
//! input/weight/bias adjoints.
//!
//! Supported filters are 3x3 (pad 1) and 1x1 (pad 0), both stride 1, so the
//! spatial size is always preserved. The 1x1 case skips the column buffer
//! entirely and multiplies against the input planes in place.

use super::{Scalar, Shape, Tensor};

/// Column buffer layout: rows are `(ci, ky, kx)`, columns are output pixels
/// `(y, x)` of one sample.
fn im2col<T: Scalar>(x: &Tensor<T>, n: usize, k: usize, pad: usize, col: &mut [T]) {
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let cols = h * w;
    col.fill(T::zero());
    for ci in 0..s.c {
        let plane = x.plane(n, ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut col[row * cols..(row + 1) * cols];
                // Source pixel for output (y, x) is (y + ky - pad, x + kx - pad);
                // copy the valid span of every row in one shot.
                let (x0, src_x0) = if kx >= pad { (0, kx - pad) } else { (pad - kx, 0) };
                let span = w - x0 - src_x0;
                for y in 0..h {
                    let iy = y + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    out[y * w + x0..y * w + x0 + span]
                        .copy_from_slice(&plane[iy * w + src_x0..iy * w + src_x0 + span]);
                }
            }
        }
    }
}

/// Scatter-add the column-space gradient back onto one input sample.
/// Mirrors `im2col`: same row spans, reversed direction, accumulating.
fn col2im_add<T: Scalar>(col: &[T], grad_x: &mut [T], shape: Shape, n: usize, k: usize, pad: usize) {
    let (h, w) = (shape.h, shape.w);
    let cols = h * w;
    for ci in 0..shape.c {
        let base = shape.plane(n, ci);
        let plane = &mut grad_x[base..base + cols];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (x0, dst_x0) = if kx >= pad { (0, kx - pad) } else { (pad - kx, 0) };
                let span = w - x0 - dst_x0;
                for y in 0..h {
                    let iy = y + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let dst = &mut plane[iy * w + dst_x0..iy * w + dst_x0 + span];
                    let s = &src[y * w + x0..y * w + x0 + span];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// `out[n,co,y,x] = sum_{ci,ky,kx} w[co,ci,ky,kx] * x[n,ci,y+ky-pad,x+kx-pad] + b[co]`.
pub(super) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    k: usize,
    pad: usize,
) -> Tensor<T> {
    let s = x.shape();
    let c_out = weight.shape().n;
    let kk = s.c * k * k;
    let cols = s.h * s.w;
    let out_shape = Shape {
        n: s.n,
        c: c_out,
        h: s.h,
        w: s.w,
    };
    let mut out = Tensor::zeros(out_shape);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * cols] };
    for n in 0..s.n {
        let c_slice = &mut out.data_mut()[out_shape.plane(n, 0)..out_shape.plane(n, 0) + c_out * cols];
        if k == 1 {
            let x_slice = &x.data()[s.plane(n, 0)..s.plane(n, 0) + s.c * cols];
            T::gemm(
                c_out, kk, cols,
                T::one(), weight.data(), kk as isize, 1,
                x_slice, cols as isize, 1,
                T::zero(), c_slice, cols as isize, 1,
            );
        } else {
            im2col(x, n, k, pad, &mut col);
            T::gemm(
                c_out, kk, cols,
                T::one(), weight.data(), kk as isize, 1,
                &col, cols as isize, 1,
                T::zero(), c_slice, cols as isize, 1,
            );
        }
        for co in 0..c_out {
            let b = bias.data()[co];
            for v in &mut c_slice[co * cols..(co + 1) * cols] {
                *v = *v + b;
            }
        }
    }
    out
}

pub(super) struct ConvGrads<T> {
    pub grad_x: Vec<T>,
    pub grad_w: Vec<T>,
    pub grad_b: Vec<T>,
}

pub(super) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    k: usize,
    pad: usize,
) -> ConvGrads<T> {
    let s = x.shape();
    let c_out = weight.shape().n;
    let kk = s.c * k * k;
    let cols = s.h * s.w;

    let mut grad_x = vec![T::zero(); s.count()];
    let mut grad_w = vec![T::zero(); weight.data().len()];
    let mut grad_b = vec![T::zero(); c_out];

    // Bias: plain sum of the output gradient per channel, accumulated at f64.
    for (co, gb) in grad_b.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for n in 0..s.n {
            let start = (n * c_out + co) * cols;
            for &g in &grad_out[start..start + cols] {
                acc += g.as_f64();
            }
        }
        *gb = T::from_f64(acc);
    }

    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * cols] };
    let mut col_grad = if k == 1 { Vec::new() } else { vec![T::zero(); kk * cols] };
    for n in 0..s.n {
        let g_slice = &grad_out[n * c_out * cols..(n + 1) * c_out * cols];
        if k == 1 {
            let x_slice = &x.data()[s.plane(n, 0)..s.plane(n, 0) + s.c * cols];
            // dW += G @ X^T
            T::gemm(
                c_out, cols, kk,
                T::one(), g_slice, cols as isize, 1,
                x_slice, 1, cols as isize,
                T::one(), &mut grad_w, kk as isize, 1,
            );
            // dX += W^T @ G
            let gx_slice = &mut grad_x[s.plane(n, 0)..s.plane(n, 0) + s.c * cols];
            T::gemm(
                kk, c_out, cols,
                T::one(), weight.data(), 1, kk as isize,
                g_slice, cols as isize, 1,
                T::one(), gx_slice, cols as isize, 1,
            );
        } else {
            im2col(x, n, k, pad, &mut col);
            T::gemm(
                c_out, cols, kk,
                T::one(), g_slice, cols as isize, 1,
                &col, 1, cols as isize,
                T::one(), &mut grad_w, kk as isize, 1,
            );
            T::gemm(
                kk, c_out, cols,
                T::one(), weight.data(), 1, kk as isize,
                g_slice, cols as isize, 1,
                T::zero(), &mut col_grad, cols as isize, 1,
            );
            col2im_add(&col_grad, &mut grad_x, s, n, k, pad);
        }
    }

    ConvGrads {
        grad_x,
        grad_w,
        grad_b,
    }
}
