//! Separable image resampling expressed as `M_h · X · M_wᵀ` per plane, which
//! makes the op linear and trivially differentiable.

use crate::autograd::Var;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;
use crate::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleKernel {
    Nearest,
    Bilinear,
    /// Catmull-Rom cubic convolution, `a = -0.5`.
    Bicubic,
}

/// Cubic convolution kernel with parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// `[out, in]` interpolation matrix using half-pixel centres and edge
/// clamping (no antialiasing when shrinking).
pub fn resample_matrix(input: usize, output: usize, kernel: ResampleKernel) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    let clamp = |i: isize| i.clamp(0, input as isize - 1) as usize;
    for o in 0..output {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let row = &mut m[o * input..(o + 1) * input];
        match kernel {
            ResampleKernel::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(input - 1);
                row[i] = 1.0;
            }
            ResampleKernel::Bilinear => {
                let src = src.max(0.0);
                let i0 = src.floor() as isize;
                let t = src - i0 as f64;
                row[clamp(i0)] += 1.0 - t;
                row[clamp(i0 + 1)] += t;
            }
            ResampleKernel::Bicubic => {
                let i0 = src.floor() as isize;
                let t = src - i0 as f64;
                for k in -1..=2isize {
                    row[clamp(i0 + k)] += cubic_kernel(t - k as f64, -0.5);
                }
            }
        }
    }
    m
}

fn apply<T: Scalar>(x: &Tensor<T>, mh: &[T], mw: &[T], ho: usize, wo: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut tmp = vec![T::zero(); ho * w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        gemm(false, false, ho, h, w, T::one(), mh, src, T::zero(), &mut tmp);
        gemm(false, true, ho, w, wo, T::one(), &tmp, mw, T::zero(), &mut out[p * ho * wo..(p + 1) * ho * wo]);
    }
    Tensor::new([n, c, ho, wo], out)
}

/// Resamples an NCHW tensor to `ho x wo` (value only).
pub fn resize<T: Scalar>(x: &Tensor<T>, ho: usize, wo: usize, kernel: ResampleKernel) -> Result<Tensor<T>> {
    if x.rank() != 4 || ho == 0 || wo == 0 {
        return Err(TensorError::Shape(format!(
            "resize expects NCHW and a non-empty target, got {:?} -> {ho}x{wo}",
            x.shape()
        )));
    }
    let (_, _, h, w) = x.dims4();
    if h == ho && w == wo {
        return Ok(x.clone());
    }
    let mh: Vec<T> = resample_matrix(h, ho, kernel).into_iter().map(T::c).collect();
    let mw: Vec<T> = resample_matrix(w, wo, kernel).into_iter().map(T::c).collect();
    Ok(apply(x, &mh, &mw, ho, wo))
}

impl<T: Scalar> Var<T> {
    /// Differentiable resampling of an NCHW tensor.
    pub fn resize(&self, ho: usize, wo: usize, kernel: ResampleKernel) -> Result<Var<T>> {
        if self.value().rank() != 4 || ho == 0 || wo == 0 {
            return Err(TensorError::Shape(format!(
                "resize expects NCHW and a non-empty target, got {:?} -> {ho}x{wo}",
                self.shape()
            )));
        }
        let (_, _, h, w) = self.value().dims4();
        if h == ho && w == wo {
            return Ok(self.clone());
        }
        let mh: Vec<T> = resample_matrix(h, ho, kernel).into_iter().map(T::c).collect();
        let mw: Vec<T> = resample_matrix(w, wo, kernel).into_iter().map(T::c).collect();
        let out = apply(self.value(), &mh, &mw, ho, wo);
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                // g is [n, c, ho, wo]; adjoint maps back to [n, c, h, w]
                let (n, c, _, _) = g.dims4();
                let mut gx = vec![T::zero(); n * c * h * w];
                let mut tmp = vec![T::zero(); h * wo];
                for p in 0..n * c {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    gemm(true, false, h, ho, wo, T::one(), &mh, src, T::zero(), &mut tmp);
                    gemm(false, false, h, wo, w, T::one(), &tmp, &mw, T::zero(), &mut gx[p * h * w..(p + 1) * h * w]);
                }
                vec![Some(Tensor::new([n, c, h, w], gx))]
            }),
        ))
    }
}
