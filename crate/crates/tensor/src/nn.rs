//! Layers that own [`ParamId`]s into a [`ParamStore`]. Layers are plain data;
//! the forward pass takes a [`Session`].

use rand::Rng;

use crate::autograd::Var;
use crate::ops::conv::Conv2dSpec;
use crate::params::{ParamId, Scope, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Default,
    Zeros,
    Normal(f64),
}

fn init_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Default => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::rand_uniform(shape.to_vec(), -bound, bound, rng)
        }
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Normal(std) => Tensor::<T>::randn(shape.to_vec(), rng).scale(T::c(std)),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = scope.param("weight", init_tensor(&[out_features, in_features], in_features, init, rng));
        let bias = bias.then(|| {
            let b = match init {
                Init::Default => init_tensor(&[out_features], in_features, Init::Default, rng),
                _ => Tensor::zeros([out_features]),
            };
            scope.param("bias", b)
        });
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.map(|b| s.param(b));
        x.linear(&s.param(self.weight), b.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = scope.param(
            "weight",
            init_tensor(&[out_channels, in_channels, kernel, kernel], fan_in, init, rng),
        );
        let b = match init {
            Init::Default => init_tensor(&[out_channels], fan_in, Init::Default, rng),
            _ => Tensor::zeros([out_channels]),
        };
        let bias = Some(scope.param("bias", b));
        Self { weight, bias, spec: Conv2dSpec { stride, padding }, in_channels, out_channels, kernel }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.map(|b| s.param(b));
        x.conv2d(&s.param(self.weight), b.as_ref(), self.spec)
    }

    pub fn num_parameters(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(scope: &mut Scope<'_, T>, channels: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = kernel * kernel;
        let weight = scope.param("weight", init_tensor(&[channels, 1, kernel, kernel], fan_in, Init::Default, rng));
        let bias = scope.param("bias", init_tensor(&[channels], fan_in, Init::Default, rng));
        Self { weight, bias, padding: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        x.depthwise_conv2d(&s.param(self.weight), Some(&s.param(self.bias)), self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = out_channels * kernel * kernel;
        let weight = scope.param(
            "weight",
            init_tensor(&[in_channels, out_channels, kernel, kernel], fan_in, Init::Default, rng),
        );
        let bias = scope.param("bias", init_tensor(&[out_channels], fan_in, Init::Default, rng));
        Self { weight, bias, spec: Conv2dSpec { stride, padding } }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        x.conv_transpose2d(&s.param(self.weight), Some(&s.param(self.bias)), self.spec)
    }
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, dim: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (Some(scope.param("gamma", Tensor::ones([dim]))), Some(scope.param("beta", Tensor::zeros([dim]))))
        } else {
            (None, None)
        };
        Self { gamma, beta, eps: 1e-6 }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = self.gamma.map(|p| s.param(p));
        let b = self.beta.map(|p| s.param(p));
        x.layer_norm(g.as_ref(), b.as_ref(), self.eps)
    }
}

/// Layer norm across channels of an NCHW tensor.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub eps: f64,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(scope.param("gamma", Tensor::ones([channels]))),
                Some(scope.param("beta", Tensor::zeros([channels]))),
            )
        } else {
            (None, None)
        };
        Self { gamma, beta, eps: 1e-6 }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = self.gamma.map(|p| s.param(p));
        let b = self.beta.map(|p| s.param(p));
        x.channel_norm(g.as_ref(), b.as_ref(), self.eps)
    }
}

/// Batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize) -> Self {
        Self {
            gamma: scope.param("gamma", Tensor::ones([channels])),
            beta: scope.param("beta", Tensor::zeros([channels])),
            running_mean: scope.buffer("running_mean", Tensor::zeros([channels])),
            running_var: scope.buffer("running_var", Tensor::ones([channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let c = gamma.shape()[0];
        if s.is_training() {
            let (y, mean, var) = x.batch_norm_train(&gamma, &beta, self.eps)?;
            let (n, _, h, w) = x.value().dims4();
            let count = (n * h * w) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = T::c(self.momentum);
            let rm = s.store().get(self.running_mean).zip_map(&mean, |r, b| (T::one() - m) * r + m * b);
            let rv = s
                .store()
                .get(self.running_var)
                .zip_map(&var, |r, b| (T::one() - m) * r + m * b * T::c(unbias));
            s.update_buffer(self.running_mean, rm);
            s.update_buffer(self.running_var, rv);
            Ok(y)
        } else {
            let mean = s.store().get(self.running_mean);
            let var = s.store().get(self.running_var);
            let eps = T::c(self.eps);
            let inv = var.map(|v| T::one() / (v + eps).sqrt());
            let shift = Var::constant(mean.zip_map(&inv, |m, i| -m * i).reshape([1, c, 1, 1])?);
            let scale = Var::constant(inv.reshape([1, c, 1, 1])?);
            let xn = x.mul(&scale)?.add(&shift)?;
            xn.mul(&gamma.reshape([1, c, 1, 1])?)?.add(&beta.reshape([1, c, 1, 1])?)
        }
    }
}

/// ConvNeXt-V2 global response normalization on NCHW tensors:
/// `y = gamma * (x * N(x)) + beta + x` with `N(x) = G(x) / mean_c G(x)` and
/// `G(x)` the per-channel spatial L2 norm.
#[derive(Debug, Clone)]
pub struct GlobalResponseNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GlobalResponseNorm {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize) -> Self {
        Self {
            gamma: scope.param("gamma", Tensor::zeros([1, channels, 1, 1])),
            beta: scope.param("beta", Tensor::zeros([1, channels, 1, 1])),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gx = x.square().sum_dims(&[2, 3])?.add_scalar(1e-12).sqrt();
        let nx = gx.div(&gx.mean_dims(&[1])?.add_scalar(1e-6))?;
        let y = x.mul(&nx)?.mul(&s.param(self.gamma))?;
        y.add(&s.param(self.beta))?.add(x)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(scope: &mut Scope<'_, T>, rows: usize, dim: usize, rng: &mut R) -> Self {
        let table = scope.param("table", Tensor::<T>::randn([rows, dim], rng));
        Self { table, dim }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, indices: &[usize], prefix: &[usize]) -> Result<Var<T>> {
        s.param(self.table).gather_rows(indices, prefix)
    }
}

/// Multi-head attention from query tokens `[N, L, C]` onto context tokens
/// `[N, S, D]`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        dim: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "attention width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(&mut scope.sub("q"), dim, dim, true, Init::Default, rng),
            k: Linear::new(&mut scope.sub("k"), context_dim, dim, true, Init::Default, rng),
            v: Linear::new(&mut scope.sub("v"), context_dim, dim, true, Init::Default, rng),
            out: Linear::new(&mut scope.sub("out"), dim, dim, true, Init::Default, rng),
            heads,
        }
    }

    fn split_heads<T: Scalar>(x: &Var<T>, heads: usize) -> Result<Var<T>> {
        let (n, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        x.reshape([n, l, heads, c / heads])?.permute(&[0, 2, 1, 3])?.reshape([n * heads, l, c / heads])
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>, context: &Var<T>) -> Result<Var<T>> {
        if x.value().rank() != 3 || context.value().rank() != 3 || x.shape()[0] != context.shape()[0] {
            return Err(TensorError::Shape(format!(
                "attention expects [N,L,C] and [N,S,D], got {:?} and {:?}",
                x.shape(),
                context.shape()
            )));
        }
        let (n, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.heads;
        let q = Self::split_heads(&self.q.forward(s, x)?, h)?;
        let k = Self::split_heads(&self.k.forward(s, context)?, h)?;
        let v = Self::split_heads(&self.v.forward(s, context)?, h)?;
        let scale = 1.0 / ((c / h) as f64).sqrt();
        let attn = q.bmm(&k, false, true)?.scale(scale).softmax()?;
        let o = attn.bmm(&v, false, false)?;
        let o = o.reshape([n, h, l, c / h])?.permute(&[0, 2, 1, 3])?.reshape([n, l, c])?;
        self.out.forward(s, &o)
    }
}
