//! 2-D convolutions on NCHW tensors. Dense convolutions lower to im2col +
//! gemm; depthwise convolutions use a direct kernel.

use crate::autograd::Var;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;
use crate::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return Err(TensorError::Shape(format!(
            "kernel {k} larger than padded input {padded} (stride {stride})"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfolds one `[C, H, W]` plane stack into `[C*kh*kw, Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ho * wo;
                let dst = &mut cols[row..row + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *v = if ix >= 0 && ix < w as isize { srow[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[C, H, W]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ho * wo;
                let src = &cols[row..row + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, spec: Conv2dSpec) -> bool {
    kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0
}

/// Dense convolution forward. `w` is `[O, C, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4();
    if w.rank() != 4 || w.dim(1) != c {
        return Err(TensorError::Shape(format!(
            "conv2d: input {:?} incompatible with weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let ho = out_dim(h, kh, spec.stride, spec.padding)?;
    let wo = out_dim(wd, kw, spec.stride, spec.padding)?;
    let ckk = c * kh * kw;
    let mut out = vec![T::zero(); n * o * ho * wo];
    let mut cols = if is_pointwise(kh, kw, spec) { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
    for b in 0..n {
        let xs = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
        let dst = &mut out[b * o * ho * wo..(b + 1) * o * ho * wo];
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                dst[oc * ho * wo..(oc + 1) * ho * wo].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let rhs: &[T] = if cols.is_empty() {
            xs
        } else {
            im2col(xs, c, h, wd, kh, kw, spec.stride, spec.padding, ho, wo, &mut cols);
            &cols
        };
        gemm(false, false, o, ckk, ho * wo, T::one(), w.data(), rhs, beta, dst);
    }
    Ok(Tensor::new([n, o, ho, wo], out))
}

/// Gradient of a dense convolution with respect to its input, which is also
/// the forward pass of the transposed convolution.
fn conv2d_input_grad<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: [usize; 4],
    spec: Conv2dSpec,
) -> Tensor<T> {
    let [n, c, h, wd] = in_shape;
    let (_, o, ho, wo) = g.dims4();
    let (kh, kw) = (w.dim(2), w.dim(3));
    let ckk = c * kh * kw;
    let mut gx = vec![T::zero(); n * c * h * wd];
    let pointwise = is_pointwise(kh, kw, spec);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ckk * ho * wo }];
    for b in 0..n {
        let gs = &g.data()[b * o * ho * wo..(b + 1) * o * ho * wo];
        let dst = &mut gx[b * c * h * wd..(b + 1) * c * h * wd];
        if pointwise {
            gemm(true, false, c, o, ho * wo, T::one(), w.data(), gs, T::zero(), dst);
        } else {
            gemm(true, false, ckk, o, ho * wo, T::one(), w.data(), gs, T::zero(), &mut cols);
            col2im(&cols, c, h, wd, kh, kw, spec.stride, spec.padding, ho, wo, dst);
        }
    }
    Tensor::new(in_shape, gx)
}

/// Weight gradient `[O, C, kh, kw]` of a dense convolution, where `g` is the
/// gradient of the output.
fn conv2d_weight_grad<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, wshape: [usize; 4], spec: Conv2dSpec) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (_, o, ho, wo) = g.dims4();
    let [_, _, kh, kw] = wshape;
    let ckk = c * kh * kw;
    let mut gw = vec![T::zero(); o * ckk];
    let pointwise = is_pointwise(kh, kw, spec);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ckk * ho * wo }];
    for b in 0..n {
        let xs = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
        let gs = &g.data()[b * o * ho * wo..(b + 1) * o * ho * wo];
        let rhs: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, h, wd, kh, kw, spec.stride, spec.padding, ho, wo, &mut cols);
            &cols
        };
        gemm(false, true, o, ho * wo, ckk, T::one(), gs, rhs, T::one(), &mut gw);
    }
    Tensor::new(wshape, gw)
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = g.dims4();
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ci, acc) in out.iter_mut().enumerate() {
            let base = (b * c + ci) * h * w;
            *acc += g.data()[base..base + h * w].iter().copied().sum::<T>();
        }
    }
    Tensor::new([c], out)
}

/// Depthwise convolution forward. `w` is `[C, 1, kh, kw]`, stride 1.
fn depthwise_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4();
    if w.rank() != 4 || w.dim(0) != c || w.dim(1) != 1 {
        return Err(TensorError::Shape(format!(
            "depthwise conv: input {:?} incompatible with weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (kh, kw) = (w.dim(2), w.dim(3));
    let ho = out_dim(h, kh, 1, pad)?;
    let wo = out_dim(wd, kw, 1, pad)?;
    let mut out = vec![T::zero(); n * c * ho * wo];
    for b in 0..n {
        for ci in 0..c {
            let src = &x.data()[(b * c + ci) * h * wd..(b * c + ci + 1) * h * wd];
            let dst = &mut out[(b * c + ci) * ho * wo..(b * c + ci + 1) * ho * wo];
            if let Some(bias) = bias {
                dst.fill(bias.data()[ci]);
            }
            let k = &w.data()[ci * kh * kw..(ci + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[ky * kw + kx];
                    // ox range with ix = ox + kx - pad inside [0, wd)
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (wd + pad).saturating_sub(kx).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * wd..];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        let shift = ox_lo + kx - pad;
                        for (d, s) in drow[ox_lo..ox_hi].iter_mut().zip(&srow[shift..shift + ox_hi - ox_lo]) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new([n, c, ho, wo], out))
}

fn depthwise_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (_, _, ho, wo) = g.dims4();
    let (kh, kw) = (w.dim(2), w.dim(3));
    let mut gx = if need_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
    let mut gw = if need_w { vec![T::zero(); c * kh * kw] } else { Vec::new() };
    for b in 0..n {
        for ci in 0..c {
            let plane = (b * c + ci) * h * wd;
            let gplane = &g.data()[(b * c + ci) * ho * wo..(b * c + ci + 1) * ho * wo];
            let k = &w.data()[ci * kh * kw..(ci + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (wd + pad).saturating_sub(kx).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let shift = ox_lo + kx - pad;
                    let len = ox_hi - ox_lo;
                    let wv = k[ky * kw + kx];
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
                        let row = plane + iy as usize * wd + shift;
                        if need_w {
                            let xrow = &x.data()[row..row + len];
                            for (a, b) in grow.iter().zip(xrow) {
                                acc += *a * *b;
                            }
                        }
                        if need_x {
                            for (d, s) in gx[row..row + len].iter_mut().zip(grow) {
                                *d += wv * *s;
                            }
                        }
                    }
                    if need_w {
                        gw[ci * kh * kw + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    (
        need_x.then(|| Tensor::new([n, c, h, wd], gx)),
        need_w.then(|| Tensor::new(w.shape().to_vec(), gw)),
    )
}

impl<T: Scalar> Var<T> {
    /// Dense 2-D convolution; `weight` is `[O, C, kh, kw]`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, spec: Conv2dSpec) -> Result<Var<T>> {
        if self.value().rank() != 4 {
            return Err(TensorError::Shape(format!("conv2d expects NCHW, got {:?}", self.shape())));
        }
        let x = self.value().clone();
        let w = weight.value().clone();
        let out = conv2d_forward(&x, &w, bias.map(|b| b.value()), spec)?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Var::from_op(
            out,
            parents,
            Box::new(move |g, need| {
                let (n, c, h, wd) = x.dims4();
                let wshape = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
                let mut res = vec![
                    need[0].then(|| conv2d_input_grad(g, &w, [n, c, h, wd], spec)),
                    need[1].then(|| conv2d_weight_grad(g, &x, wshape, spec)),
                ];
                if has_bias {
                    res.push(need[2].then(|| channel_sums(g)));
                }
                res
            }),
        ))
    }

    /// Depthwise 2-D convolution (one filter per channel, stride 1);
    /// `weight` is `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, padding: usize) -> Result<Var<T>> {
        if self.value().rank() != 4 {
            return Err(TensorError::Shape(format!("depthwise conv expects NCHW, got {:?}", self.shape())));
        }
        let x = self.value().clone();
        let w = weight.value().clone();
        let out = depthwise_forward(&x, &w, bias.map(|b| b.value()), padding)?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Var::from_op(
            out,
            parents,
            Box::new(move |g, need| {
                let (gx, gw) = depthwise_backward(g, &x, &w, padding, need[0], need[1]);
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(need[2].then(|| channel_sums(g)));
                }
                res
            }),
        ))
    }

    /// Transposed convolution; `weight` is `[C_in, C_out, kh, kw]`. Output
    /// side length is `(H - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, spec: Conv2dSpec) -> Result<Var<T>> {
        if self.value().rank() != 4 {
            return Err(TensorError::Shape(format!(
                "conv_transpose2d expects NCHW, got {:?}",
                self.shape()
            )));
        }
        let x = self.value().clone();
        let w = weight.value().clone();
        let (n, cin, h, wd) = x.dims4();
        if w.rank() != 4 || w.dim(0) != cin {
            return Err(TensorError::Shape(format!(
                "conv_transpose2d: input {:?} incompatible with weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (cout, kh, kw) = (w.dim(1), w.dim(2), w.dim(3));
        let ho = ((h - 1) * spec.stride + kh)
            .checked_sub(2 * spec.padding)
            .ok_or_else(|| TensorError::Shape("conv_transpose2d: padding too large".into()))?;
        let wo = ((wd - 1) * spec.stride + kw)
            .checked_sub(2 * spec.padding)
            .ok_or_else(|| TensorError::Shape("conv_transpose2d: padding too large".into()))?;
        // the forward pass is the input-gradient of a conv with weight [C_in, C_out, kh, kw]
        // mapping [C_out, Ho, Wo] -> [C_in, H, W]
        let mut out = conv2d_input_grad(&x, &w, [n, cout, ho, wo], spec);
        if let Some(b) = bias {
            let bd = b.value().data().to_vec();
            let od = out.data_mut();
            for bi in 0..n {
                for (co, &bv) in bd.iter().enumerate() {
                    for v in &mut od[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo] {
                        *v += bv;
                    }
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Var::from_op(
            out,
            parents,
            Box::new(move |g, need| {
                let mut res = vec![
                    need[0].then(|| conv2d_forward(g, &w, None, spec).expect("conv")),
                    need[1].then(|| {
                        // weight of the adjoint conv: grad wrt w is conv2d_weight_grad(x, g)
                        conv2d_weight_grad(&x, g, [cin, cout, kh, kw], spec)
                    }),
                ];
                if has_bias {
                    res.push(need[2].then(|| channel_sums(g)));
                }
                res
            }),
        ))
    }
}
