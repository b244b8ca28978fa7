//! 2D cross-correlation on single planes, plus its two adjoints.
//!
//! The convention is cross-correlation (no kernel flip) with zero padding:
//!
//! `out[r, c] = sum_{a, b} padded_in[r * stride + a, c * stride + b] * ker[a, b]`
//!
//! The accumulation kernels below run with the kernel loop outermost so the
//! inner loops stream over contiguous rows. Every loop order is fixed, which
//! keeps floating-point results bit-identical from run to run.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a correlation along one axis.
pub fn out_dim(n: usize, k: usize, pad: usize, stride: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Valid output-index range `[lo, hi)` for kernel offset `a`, so that
/// `r * stride + a - pad` stays inside `[0, n_in)`.
#[inline]
fn out_range(a: usize, n_in: usize, n_out: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if a >= pad {
        0
    } else {
        (pad - a + stride - 1) / stride
    };
    let hi = if n_in + pad > a {
        ((n_in + pad - 1 - a) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Accumulates `input (cross-corr) kernel` into `out`.
pub fn corr2d_acc(
    input: &[f64],
    h_in: usize,
    w_in: usize,
    kernel: &[f64],
    k: usize,
    pad: usize,
    stride: usize,
    out: &mut [f64],
    h_out: usize,
    w_out: usize,
) {
    debug_assert_eq!(input.len(), h_in * w_in);
    debug_assert_eq!(kernel.len(), k * k);
    debug_assert_eq!(out.len(), h_out * w_out);
    for a in 0..k {
        let (r_lo, r_hi) = out_range(a, h_in, h_out, pad, stride);
        for b in 0..k {
            let kv = kernel[a * k + b];
            let (c_lo, c_hi) = out_range(b, w_in, w_out, pad, stride);
            if c_lo >= c_hi {
                continue;
            }
            if stride == 1 {
                for r in r_lo..r_hi {
                    let ri = r + a - pad;
                    let src = &input[ri * w_in + c_lo + b - pad..][..c_hi - c_lo];
                    let dst = &mut out[r * w_out + c_lo..r * w_out + c_hi];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += kv * s;
                    }
                }
            } else {
                for r in r_lo..r_hi {
                    let ri = r * stride + a - pad;
                    let irow = ri * w_in + b;
                    let orow = r * w_out;
                    for c in c_lo..c_hi {
                        out[orow + c] += kv * input[irow + c * stride - pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`corr2d_acc`] with respect to the input: accumulates the
/// upstream gradient back onto `d_input`.
pub fn corr2d_input_grad_acc(
    d_input: &mut [f64],
    h_in: usize,
    w_in: usize,
    kernel: &[f64],
    k: usize,
    pad: usize,
    stride: usize,
    d_out: &[f64],
    h_out: usize,
    w_out: usize,
) {
    for a in 0..k {
        let (r_lo, r_hi) = out_range(a, h_in, h_out, pad, stride);
        for b in 0..k {
            let kv = kernel[a * k + b];
            let (c_lo, c_hi) = out_range(b, w_in, w_out, pad, stride);
            if c_lo >= c_hi {
                continue;
            }
            if stride == 1 {
                for r in r_lo..r_hi {
                    let ri = r + a - pad;
                    let dst = &mut d_input[ri * w_in + c_lo + b - pad..][..c_hi - c_lo];
                    let src = &d_out[r * w_out + c_lo..r * w_out + c_hi];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += kv * s;
                    }
                }
            } else {
                for r in r_lo..r_hi {
                    let ri = r * stride + a - pad;
                    let irow = ri * w_in + b;
                    let orow = r * w_out;
                    for c in c_lo..c_hi {
                        d_input[irow + c * stride - pad] += kv * d_out[orow + c];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`corr2d_acc`] with respect to the kernel.
pub fn corr2d_kernel_grad_acc(
    input: &[f64],
    h_in: usize,
    w_in: usize,
    d_kernel: &mut [f64],
    k: usize,
    pad: usize,
    stride: usize,
    d_out: &[f64],
    h_out: usize,
    w_out: usize,
) {
    for a in 0..k {
        let (r_lo, r_hi) = out_range(a, h_in, h_out, pad, stride);
        for b in 0..k {
            let (c_lo, c_hi) = out_range(b, w_in, w_out, pad, stride);
            if c_lo >= c_hi {
                continue;
            }
            let mut acc = 0.0;
            if stride == 1 {
                for r in r_lo..r_hi {
                    let ri = r + a - pad;
                    let src = &input[ri * w_in + c_lo + b - pad..][..c_hi - c_lo];
                    let dst = &d_out[r * w_out + c_lo..r * w_out + c_hi];
                    for (d, s) in dst.iter().zip(src) {
                        acc += d * s;
                    }
                }
            } else {
                for r in r_lo..r_hi {
                    let ri = r * stride + a - pad;
                    let irow = ri * w_in + b;
                    let orow = r * w_out;
                    for c in c_lo..c_hi {
                        acc += d_out[orow + c] * input[irow + c * stride - pad];
                    }
                }
            }
            d_kernel[a * k + b] += acc;
        }
    }
}

/// Cross-correlation of a 2D input with a square kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    if input.rank() != 2 {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: input.shape().to_vec(),
            reason: "input must be rank 2".into(),
        });
    }
    if kernel.rank() != 2 || kernel.shape()[0] != kernel.shape()[1] {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: kernel.shape().to_vec(),
            reason: "kernel must be square".into(),
        });
    }
    if stride == 0 {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: input.shape().to_vec(),
            reason: "stride must be positive".into(),
        });
    }
    let (h_in, w_in) = (input.shape()[0], input.shape()[1]);
    let k = kernel.shape()[0];
    if k > h_in + 2 * padding || k > w_in + 2 * padding {
        return Err(Error::DimensionMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let h_out = out_dim(h_in, k, padding, stride);
    let w_out = out_dim(w_in, k, padding, stride);
    let mut out = Tensor::zeros(&[h_out, w_out]);
    corr2d_acc(
        input.data(),
        h_in,
        w_in,
        kernel.data(),
        k,
        padding,
        stride,
        out.data_mut(),
        h_out,
        w_out,
    );
    Ok(out)
}
