//! Semantic compressor: bicubic resize, mean/std normalization, a strided
//! convolutional backbone with total stride 32, and a normalizing 1x1
//! projection to the 16-channel semantic latent.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wurstkit_tensor::nn::{ChannelNorm, Conv2d, Init};
use wurstkit_tensor::{ParamStore, ResampleKernel, Scalar, Session, Tensor, Var};

use crate::blocks::ConvNextBlock;
use crate::{Error, Result};

pub const SEMANTIC_CHANNELS: usize = 16;
pub const BACKBONE_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressorConfig {
    /// Side length images are resized to before the backbone.
    pub input_size: usize,
    /// Width of the first backbone stage; each stride-2 stage doubles it.
    pub width: usize,
    /// ConvNeXt blocks after the last downsampling.
    pub blocks: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self { input_size: 128, width: 16, blocks: 1, mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(BACKBONE_STRIDE) {
            return Err(Error::Config(format!("compressor input_size must be a multiple of {BACKBONE_STRIDE}")));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("compressor std entries must be positive".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("compressor width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.input_size / BACKBONE_STRIDE
    }

    /// Channels of the backbone feature map fed to the projection.
    pub fn backbone_channels(&self) -> usize {
        self.width * 8
    }
}

/// Bicubic resampling (Catmull-Rom, `a = -0.5`) of `[N, C, H, W]` images,
/// clipped to `[0, 1]`.
pub fn resize_bicubic<T: Scalar>(images: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    if height == 0 || width == 0 {
        return Err(Error::Domain("resize target must be at least 1x1".into()));
    }
    let out = wurstkit_tensor::ops::resize::resize(images, height, width, ResampleKernel::Bicubic)?;
    Ok(out.clamp(T::zero(), T::one()))
}

#[derive(Debug, Clone)]
pub struct SemanticCompressor {
    pub cfg: CompressorConfig,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    blocks: Vec<ConvNextBlock>,
    proj: Conv2d,
    norm: ChannelNorm,
}

impl SemanticCompressor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: CompressorConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        // stem: stride 4; three stride-2 stages: total stride 32
        let stem = Conv2d::new(&mut store.scope("csc.stem"), 3, w, 4, 4, 0, Init::Default, rng);
        let downs = (0..3)
            .map(|i| {
                let (cin, cout) = (w << i, w << (i + 1));
                Conv2d::new(&mut store.scope(&format!("csc.down{i}")), cin, cout, 3, 2, 1, Init::Default, rng)
            })
            .collect();
        let c = cfg.backbone_channels();
        let blocks =
            (0..cfg.blocks).map(|i| ConvNextBlock::new(&mut store.scope(&format!("csc.block{i}")), c, 0, None, rng)).collect();
        let proj = Conv2d::new(&mut store.scope("csc.proj"), c, SEMANTIC_CHANNELS, 1, 1, 0, Init::Default, rng);
        let norm = ChannelNorm::new(&mut store.scope("csc.norm"), SEMANTIC_CHANNELS, true);
        Ok(Self { cfg, stem, downs, blocks, proj, norm })
    }

    /// `(x - μ) / σ` per RGB channel.
    pub fn normalize<T: Scalar>(&self, images: &Var<T>) -> Result<Var<T>> {
        let inv_std: Vec<f64> = self.cfg.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self.cfg.mean.iter().zip(&self.cfg.std).map(|(m, s)| -m / s).collect();
        let a = Var::constant(Tensor::from_f64([1, 3, 1, 1], &inv_std));
        let b = Var::constant(Tensor::from_f64([1, 3, 1, 1], &shift));
        Ok(images.mul(&a)?.add(&b)?)
    }

    /// Semantic latent of images already resized to `input_size`.
    pub fn compress<T: Scalar>(&self, s: &Session<'_, T>, images: &Var<T>) -> Result<Var<T>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("compressor expects [N, 3, H, W], got {shape:?}")));
        }
        if !shape[2].is_multiple_of(BACKBONE_STRIDE) || !shape[3].is_multiple_of(BACKBONE_STRIDE) {
            return Err(Error::Shape(format!("compressor input {}x{} not divisible by 32", shape[2], shape[3])));
        }
        let mut x = self.stem.forward(s, &self.normalize(images)?)?.gelu();
        for d in &self.downs {
            x = d.forward(s, &x)?.gelu();
        }
        for b in &self.blocks {
            x = b.forward(s, &x, None, None)?;
        }
        Ok(self.norm.forward(s, &self.proj.forward(s, &x)?)?)
    }

    /// Resizes raw `[0, 1]` images to the configured input size, then compresses.
    pub fn encode<T: Scalar>(&self, s: &Session<'_, T>, images: &Tensor<T>) -> Result<Var<T>> {
        let n = self.cfg.input_size;
        let resized = resize_bicubic(images, n, n)?;
        self.compress(s, &Var::constant(resized))
    }

    pub fn encode_images<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = Session::eval(store);
        Ok(self.encode(&s, images)?.value().clone())
    }
}

/// Row-major spatial flattening `[N, C, h, w] -> [N, h·w, C]`.
pub fn flatten_semantic<T: Scalar>(latent: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = latent.dims4();
    Ok(latent.reshape([n, c, h * w])?.permute(&[0, 2, 1])?)
}

/// Inverse of [`flatten_semantic`].
pub fn unflatten_semantic<T: Scalar>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, l, c) = (tokens.dim(0), tokens.dim(1), tokens.dim(2));
    if l != h * w {
        return Err(Error::Shape(format!("{l} tokens cannot form a {h}x{w} grid")));
    }
    Ok(tokens.permute(&[0, 2, 1])?.reshape([n, c, h, w])?)
}

/// Differentiable [`flatten_semantic`].
pub fn flatten_semantic_var<T: Scalar>(latent: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = latent.value().dims4();
    Ok(latent.reshape([n, c, h * w])?.permute(&[0, 2, 1])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = ParamStore::<f32>::new();
        let c = SemanticCompressor::new(CompressorConfig::default(), &mut st, &mut rng).unwrap();
        let x = Tensor::rand_uniform([2, 3, 64, 64], 0.0, 1.0, &mut rng);
        let z = c.encode_images(&st, &x).unwrap();
        assert_eq!(z.shape(), &[2, 16, 4, 4]);
        let zero = c.encode_images(&st, &Tensor::zeros([1, 3, 64, 64])).unwrap();
        assert!(zero.all_finite());
    }

    #[test]
    fn full_scale_geometry_shape_law() {
        let cfg = CompressorConfig { input_size: 768, ..Default::default() };
        assert_eq!(cfg.latent_size(), 24);
        assert!(CompressorConfig { input_size: 786, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn resize_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::rand_uniform([1, 3, 5, 7], 0.0, 1.0, &mut rng);
        let y = resize_bicubic(&x, 5, 7).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Tensor::<f64>::full([1, 3, 4, 4], 0.3);
        let up = resize_bicubic(&c, 9, 13).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(resize_bicubic(&c, 0, 4).is_err());
    }

    #[test]
    fn flatten_examples() {
        let x = Tensor::<f64>::new([1, 16, 2, 2], (0..64).map(|v| v as f64).collect());
        let f = flatten_semantic(&x).unwrap();
        assert_eq!(f.shape(), &[1, 4, 16]);
        // token 1 is spatial cell (0, 1): channel c holds c*4 + 1
        assert_eq!(f.data()[16 + 3], 13.0);
        assert_eq!(unflatten_semantic(&f, 2, 2).unwrap(), x);
        let full = Tensor::<f32>::zeros([1, 16, 24, 24]);
        assert_eq!(flatten_semantic(&full).unwrap().shape(), &[1, 576, 16]);
    }

    #[test]
    fn normalization_maps_mean_image_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = ParamStore::<f64>::new();
        let c = SemanticCompressor::new(CompressorConfig::default(), &mut st, &mut rng).unwrap();
        let mut img = Tensor::<f64>::zeros([1, 3, 2, 2]);
        for ch in 0..3 {
            for p in 0..4 {
                img.data_mut()[ch * 4 + p] = c.cfg.mean[ch];
            }
        }
        let y = c.normalize(&Var::constant(img)).unwrap();
        assert!(y.value().max_abs() < 1e-6);
    }
}
