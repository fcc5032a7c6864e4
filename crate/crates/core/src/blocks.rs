//! Building blocks shared by the Stage A, B and C networks.

use rand::Rng;
use wurstkit_tensor::nn::{ChannelNorm, Conv2d, CrossAttention, DepthwiseConv2d, GlobalResponseNorm, Init, LayerNorm, Linear};
use wurstkit_tensor::{Scalar, Scope, Session, Tensor, Var};

use crate::Result;

/// ConvNeXt-V2 block: depthwise 7x7, channel norm, pointwise expansion x4,
/// GELU, GRN, pointwise projection, residual.
///
/// `extra_channels` are concatenated after the norm, right before the first
/// pointwise convolution. With `film_dim` set, a linear map of the embedding
/// modulates the normalized features as `h·(1+γ)+β`.
#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    dw: DepthwiseConv2d,
    norm: ChannelNorm,
    film: Option<Linear>,
    pw1: Conv2d,
    grn: GlobalResponseNorm,
    pw2: Conv2d,
    channels: usize,
    extra_channels: usize,
}

impl ConvNextBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        channels: usize,
        extra_channels: usize,
        film_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let hidden = channels * 4;
        Self {
            dw: DepthwiseConv2d::new(&mut scope.sub("dw"), channels, 7, rng),
            norm: ChannelNorm::new(&mut scope.sub("norm"), channels, false),
            film: film_dim.map(|d| Linear::new(&mut scope.sub("film"), d, 2 * channels, true, Init::Zeros, rng)),
            pw1: Conv2d::new(&mut scope.sub("pw1"), channels + extra_channels, hidden, 1, 1, 0, Init::Default, rng),
            grn: GlobalResponseNorm::new(&mut scope.sub("grn"), hidden),
            pw2: Conv2d::new(&mut scope.sub("pw2"), hidden, channels, 1, 1, 0, Init::Default, rng),
            channels,
            extra_channels,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        x: &Var<T>,
        extra: Option<&Var<T>>,
        emb: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let mut h = self.norm.forward(s, &self.dw.forward(s, x)?)?;
        if let (Some(film), Some(emb)) = (&self.film, emb) {
            let n = emb.shape()[0];
            let gb = film.forward(s, emb)?.reshape([n, 2 * self.channels, 1, 1])?;
            let gamma = gb.narrow(1, 0, self.channels)?.add_scalar(1.0);
            let beta = gb.narrow(1, self.channels, self.channels)?;
            h = h.mul(&gamma)?.add(&beta)?;
        }
        if self.extra_channels > 0 {
            let e = extra.expect("block expects concatenated conditioning");
            h = Var::concat(&[&h, e], 1)?;
        }
        let h = self.pw1.forward(s, &h)?.gelu();
        let h = self.pw2.forward(s, &self.grn.forward(s, &h)?)?;
        Ok(x.add(&h)?)
    }
}

/// Pre-norm residual cross-attention from NCHW feature maps onto a context
/// sequence `[N, S, D]`.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    norm: LayerNorm,
    attn: CrossAttention,
}

impl AttnBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        channels: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(&mut scope.sub("norm"), channels, true),
            attn: CrossAttention::new(&mut scope.sub("attn"), channels, context_dim, heads, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>, context: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = x.value().dims4();
        let tokens = x.reshape([n, c, h * w])?.permute(&[0, 2, 1])?;
        let out = self.attn.forward(s, &self.norm.forward(s, &tokens)?, context)?;
        let out = out.permute(&[0, 2, 1])?.reshape([n, c, h, w])?;
        Ok(x.add(&out)?)
    }
}

/// Sinusoidal features of continuous timesteps, `[N, dim]`, half sines and
/// half cosines over geometrically spaced frequencies.
pub fn sinusoidal_embedding<T: Scalar>(ts: &[f64], dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim.is_multiple_of(2), "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        // t ∈ [0,1] is scaled to a 1000-step range before embedding
        let x = t * 1000.0;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((x * f).sin(), (x * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(T::c));
    }
    Tensor::new([ts.len(), dim], data)
}

/// Sinusoidal features followed by a two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    l1: Linear,
    l2: Linear,
    pub freq_dim: usize,
    pub dim: usize,
}

impl TimeEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(scope: &mut Scope<'_, T>, freq_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(&mut scope.sub("l1"), freq_dim, dim, true, Init::Default, rng),
            l2: Linear::new(&mut scope.sub("l2"), dim, dim, true, Init::Default, rng),
            freq_dim,
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, ts: &[f64]) -> Result<Var<T>> {
        let f = Var::constant(sinusoidal_embedding(ts, self.freq_dim));
        Ok(self.l2.forward(s, &self.l1.forward(s, &f)?.silu())?)
    }
}

/// Splits a `[N, 2C, H, W]` head output into `(A, B)`.
pub fn split_ab<T: Scalar>(out: &Var<T>) -> Result<crate::diffusion::AbPrediction<Var<T>>> {
    let c = out.shape()[1] / 2;
    Ok(crate::diffusion::AbPrediction { a: out.narrow(1, 0, c)?, b: out.narrow(1, c, c)? })
}

/// Per-sample choice between `x` (`[N, ...]`) and a learned null tensor
/// broadcastable to it; rows with `use_null[n]` become the null exactly.
pub fn select_null<T: Scalar>(x: &Var<T>, null: &Var<T>, use_null: &[bool]) -> Result<Var<T>> {
    let n = x.shape()[0];
    if use_null.len() != n {
        return Err(crate::Error::Shape(format!("{} null flags for batch of {n}", use_null.len())));
    }
    if !use_null.iter().any(|&b| b) {
        return Ok(x.clone());
    }
    let mut shape = vec![1; x.shape().len()];
    shape[0] = n;
    let m: Vec<f64> = use_null.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let keep: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    let m = Var::constant(Tensor::from_f64(shape.clone(), &m));
    let keep = Var::constant(Tensor::from_f64(shape, &keep));
    Ok(x.mul(&keep)?.add(&null.mul(&m)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use wurstkit_tensor::ParamStore;

    #[test]
    fn convnext_preserves_shape_and_uses_extra_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = ParamStore::<f32>::new();
        let b = ConvNextBlock::new(&mut st.scope("b"), 8, 3, Some(5), &mut rng);
        let s = Session::eval(&st);
        let x = Var::constant(Tensor::randn([2, 8, 6, 6], &mut rng));
        let e1 = Var::constant(Tensor::randn([2, 3, 6, 6], &mut rng));
        let e2 = Var::constant(Tensor::randn([2, 3, 6, 6], &mut rng));
        let emb = Var::constant(Tensor::randn([2, 5], &mut rng));
        let y1 = b.forward(&s, &x, Some(&e1), Some(&emb)).unwrap();
        let y2 = b.forward(&s, &x, Some(&e2), Some(&emb)).unwrap();
        assert_eq!(y1.shape(), &[2, 8, 6, 6]);
        assert_ne!(y1.value(), y2.value());
    }

    #[test]
    fn sinusoidal_is_bounded_and_distinct() {
        let e = sinusoidal_embedding::<f64>(&[0.0, 0.5, 1.0], 16);
        assert_eq!(e.shape(), &[3, 16]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.index0(0), e.index0(1));
        // t = 0 → sin = 0, cos = 1
        assert!(e.index0(0).data()[..8].iter().all(|&v| v == 0.0));
        assert!(e.index0(0).data()[8..].iter().all(|&v| v == 1.0));
    }
}
