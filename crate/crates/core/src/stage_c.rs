//! Stage C: a text-conditional diffusion prior over semantic latents, built
//! from ConvNeXt blocks at constant resolution. After every block a
//! cross-attention layer reads `[text tokens; time token]`.
//!
//! Also holds the probe decoder that maps semantic latents straight to pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wurstkit_tensor::nn::{BatchNorm2d, ChannelNorm, Conv2d, ConvTranspose2d, Init};
use wurstkit_tensor::{ParamStore, Scalar, Session, Tensor, Var};

use crate::blocks::{split_ab, AttnBlock, ConvNextBlock, TimeEmbedding};
use crate::compressor::SEMANTIC_CHANNELS;
use crate::diffusion::AbPrediction;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageCConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub text_dropout: f64,
}

impl Default for StageCConfig {
    fn default() -> Self {
        Self { blocks: 4, width: 128, heads: 4, text_dim: 64, time_dim: 64, text_dropout: 0.05 }
    }
}

impl StageCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("stage_c needs at least one block".into()));
        }
        if self.heads == 0 || self.width < self.heads || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("stage_c width {} incompatible with {} heads", self.width, self.heads)));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("stage_c time_dim must be even".into()));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::Config("stage_c text_dropout must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StageC {
    pub cfg: StageCConfig,
    stem: Conv2d,
    time: TimeEmbedding,
    blocks: Vec<ConvNextBlock>,
    attn: Vec<AttnBlock>,
    head_norm: ChannelNorm,
    head: Conv2d,
}

impl StageC {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: StageCConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let stem = Conv2d::new(&mut store.scope(&format!("{prefix}.stem")), SEMANTIC_CHANNELS, w, 1, 1, 0, Init::Default, rng);
        let time = TimeEmbedding::new(&mut store.scope(&format!("{prefix}.time")), cfg.time_dim, cfg.text_dim, rng);
        let mut blocks = Vec::new();
        let mut attn = Vec::new();
        for i in 0..cfg.blocks {
            blocks.push(ConvNextBlock::new(&mut store.scope(&format!("{prefix}.block{i}")), w, 0, None, rng));
            attn.push(AttnBlock::new(&mut store.scope(&format!("{prefix}.attn{i}")), w, cfg.text_dim, cfg.heads, rng));
        }
        let head_norm = ChannelNorm::new(&mut store.scope(&format!("{prefix}.head_norm")), w, true);
        let head = Conv2d::new(&mut store.scope(&format!("{prefix}.head")), w, 2 * SEMANTIC_CHANNELS, 1, 1, 0, Init::Zeros, rng);
        Ok(Self { cfg, stem, time, blocks, attn, head_norm, head })
    }

    /// A/B prediction for noised semantic latents `[N, 16, h, w]` given text
    /// embeddings `[N, L, d]` (null-substituted by the caller where wanted).
    pub fn predict<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        x_t: &Var<T>,
        ts: &[f64],
        text: &Var<T>,
    ) -> Result<AbPrediction<Var<T>>> {
        let xs = x_t.shape();
        if xs.len() != 4 || xs[1] != SEMANTIC_CHANNELS {
            return Err(Error::Shape(format!("stage C expects [N, {SEMANTIC_CHANNELS}, h, w], got {xs:?}")));
        }
        let n = xs[0];
        let tshape = text.shape();
        if tshape.len() != 3 || tshape[0] != n || tshape[2] != self.cfg.text_dim {
            return Err(Error::Shape(format!("stage C text {tshape:?} for batch {n}")));
        }
        if ts.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", ts.len())));
        }
        let time_token = self.time.forward(s, ts)?.reshape([n, 1, self.cfg.text_dim])?;
        let context = Var::concat(&[text, &time_token], 1)?;
        let mut h = self.stem.forward(s, x_t)?;
        for (blk, attn) in self.blocks.iter().zip(&self.attn) {
            h = blk.forward(s, &h, None, None)?;
            h = attn.forward(s, &h, &context)?;
        }
        let out = self.head.forward(s, &self.head_norm.forward(s, &h)?)?;
        split_ab(&out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeDecoderConfig {
    /// Channels after the first upsampling; halved by each further stage.
    pub base_channels: usize,
    pub stages: usize,
    pub in_channels: usize,
}

impl Default for ProbeDecoderConfig {
    fn default() -> Self {
        Self { base_channels: 64, stages: 4, in_channels: SEMANTIC_CHANNELS }
    }
}

impl ProbeDecoderConfig {
    pub fn full_scale() -> Self {
        Self { base_channels: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.in_channels == 0 {
            return Err(Error::Config("probe decoder needs >= 1 stage and input channels".into()));
        }
        if self.base_channels >> (self.stages - 1) == 0 {
            return Err(Error::Config("probe decoder base_channels too small for its stage count".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        (0..self.stages).map(|i| self.base_channels >> i).collect()
    }

    /// Closed-form parameter count: per stage a 2x2 transposed convolution,
    /// a 3x3 convolution and a BatchNorm (affine only), then a 1x1 to RGB.
    pub fn parameter_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for c in self.channels() {
            total += cin * c * 4 + c;
            total += c * c * 9 + c;
            total += 2 * c;
            cin = c;
        }
        total + cin * 3 + 3
    }

    pub fn upsampling(&self) -> usize {
        1 << self.stages
    }
}

#[derive(Debug, Clone)]
struct ProbeStage {
    up: ConvTranspose2d,
    conv: Conv2d,
    norm: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct ProbeDecoder {
    pub cfg: ProbeDecoderConfig,
    stages: Vec<ProbeStage>,
    out: Conv2d,
}

impl ProbeDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: ProbeDecoderConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let mut stages = Vec::new();
        for (i, c) in cfg.channels().into_iter().enumerate() {
            let p = format!("{prefix}.s{i}");
            stages.push(ProbeStage {
                up: ConvTranspose2d::new(&mut store.scope(&format!("{p}.up")), cin, c, 2, 2, 0, rng),
                conv: Conv2d::new(&mut store.scope(&format!("{p}.conv")), c, c, 3, 1, 1, Init::Default, rng),
                norm: BatchNorm2d::new(&mut store.scope(&format!("{p}.bn")), c),
            });
            cin = c;
        }
        let out = Conv2d::new(&mut store.scope(&format!("{prefix}.out")), cin, 3, 1, 1, 0, Init::Default, rng);
        Ok(Self { cfg, stages, out })
    }

    /// Unclipped output, for training.
    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, latent: &Var<T>) -> Result<Var<T>> {
        let shape = latent.shape();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!("probe decoder expects [N, {}, h, w], got {shape:?}", self.cfg.in_channels)));
        }
        let mut h = latent.clone();
        for st in &self.stages {
            h = st.up.forward(s, &h)?;
            h = st.norm.forward(s, &st.conv.forward(s, &h)?)?.gelu();
        }
        Ok(self.out.forward(s, &h)?)
    }

    /// Images in `[0, 1]`.
    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let s = Session::eval(store);
        let y = self.forward(&s, &Var::constant(latent.clone()))?;
        Ok(y.value().clamp(T::zero(), T::one()))
    }
}
