//! Stage B: a conditional U-Net denoiser over unquantized Stage A latents,
//! conditioned on the semantic latent, text and timestep.
//!
//! Every stage opens with a 2x2 stride-2 convolution. Stages with attention
//! heads receive the bicubic-resized semantic latent as extra channels in
//! each ConvNeXt block plus cross-attention over `[text; semantic tokens]`.
//! The decoder mirrors the encoder with additive skips and transposed
//! convolutions; the output head is zero-initialized.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wurstkit_tensor::nn::{ChannelNorm, Conv2d, ConvTranspose2d, Init, Linear};
use wurstkit_tensor::{ParamId, ParamStore, ResampleKernel, Scalar, Session, Tensor, Var};

use crate::blocks::{select_null, split_ab, AttnBlock, ConvNextBlock, TimeEmbedding};
use crate::compressor::{flatten_semantic_var, SEMANTIC_CHANNELS};
use crate::diffusion::{forward_noise, AbPrediction, NoiseSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    SemanticAndText,
    SemanticOnly,
    /// Text-only latent diffusion baseline.
    TextOnly,
}

impl Conditioning {
    pub fn uses_semantic(self) -> bool {
        !matches!(self, Self::TextOnly)
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, Self::SemanticOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBConfig {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// 0 disables attention (and semantic concatenation) in a stage.
    pub heads: Vec<usize>,
    pub latent_channels: usize,
    /// Side length of the semantic latent; sizes the learned null.
    pub semantic_size: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub conditioning: Conditioning,
    pub aug_probability: f64,
    pub aug_max_t: f64,
    pub semantic_dropout: f64,
    pub text_dropout: f64,
}

impl Default for StageBConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128],
            blocks: vec![2, 4],
            heads: vec![0, 4],
            latent_channels: 4,
            semantic_size: 4,
            text_dim: 64,
            time_dim: 64,
            conditioning: Conditioning::SemanticAndText,
            aug_probability: 0.5,
            aug_max_t: 0.3,
            semantic_dropout: 0.1,
            text_dropout: 0.05,
        }
    }
}

impl StageBConfig {
    /// The text-only baseline: same U-Net, no semantic pathway.
    pub fn baseline() -> Self {
        Self { conditioning: Conditioning::TextOnly, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.widths.len();
        if k == 0 || self.blocks.len() != k || self.heads.len() != k {
            return Err(Error::Config("stage_b widths, blocks and heads must be non-empty and equally long".into()));
        }
        for (&w, &h) in self.widths.iter().zip(&self.heads) {
            if w == 0 || (h > 0 && w % h != 0) {
                return Err(Error::Config(format!("stage_b width {w} incompatible with {h} heads")));
            }
        }
        if self.heads.iter().all(|&h| h == 0) {
            return Err(Error::Config("stage_b needs at least one attention stage for conditioning".into()));
        }
        for (name, p) in [
            ("aug_probability", self.aug_probability),
            ("semantic_dropout", self.semantic_dropout),
            ("text_dropout", self.text_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("stage_b {name} must be in [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.aug_max_t) {
            return Err(Error::Config("stage_b aug_max_t must be in [0, 1]".into()));
        }
        if self.latent_channels == 0 || self.semantic_size == 0 || self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("stage_b latent_channels, semantic_size and even time_dim required".into()));
        }
        Ok(())
    }

    /// Total downsampling of the encoder.
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Debug, Clone)]
struct Level {
    down: Conv2d,
    enc: Vec<ConvNextBlock>,
    enc_attn: Vec<AttnBlock>,
    dec: Vec<ConvNextBlock>,
    dec_attn: Vec<AttnBlock>,
    up: ConvTranspose2d,
    attention: bool,
}

#[derive(Debug, Clone)]
pub struct StageB {
    pub cfg: StageBConfig,
    time: TimeEmbedding,
    levels: Vec<Level>,
    semantic_proj: Option<Linear>,
    pub null_semantic: Option<ParamId>,
    head_norm: ChannelNorm,
    head: Conv2d,
    prefix: String,
}

/// Per-sample conditioning inputs for one denoiser call.
pub struct BConditioning<'a, T: Scalar> {
    /// `[N, 16, h_c, w_c]`; `None` uses the learned null for every sample.
    pub semantic: Option<&'a Var<T>>,
    /// `[N, L, d]` text embeddings (already null-substituted where wanted).
    pub text: &'a Var<T>,
}

impl StageB {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: StageBConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let sem = cfg.conditioning.uses_semantic();
        let extra = if sem { SEMANTIC_CHANNELS } else { 0 };
        let time = TimeEmbedding::new(&mut store.scope(&format!("{prefix}.time")), cfg.time_dim, cfg.time_dim, rng);
        let mut levels = Vec::new();
        let mut cin = cfg.latent_channels;
        for (i, ((&w, &nb), &heads)) in cfg.widths.iter().zip(&cfg.blocks).zip(&cfg.heads).enumerate() {
            let attention = heads > 0;
            let ex = if attention { extra } else { 0 };
            let p = format!("{prefix}.l{i}");
            let down = Conv2d::new(&mut store.scope(&format!("{p}.down")), cin, w, 2, 2, 0, Init::Default, rng);
            let mk_blocks = |store: &mut ParamStore<T>, tag: &str, rng: &mut R| -> Vec<ConvNextBlock> {
                (0..nb)
                    .map(|b| ConvNextBlock::new(&mut store.scope(&format!("{p}.{tag}{b}")), w, ex, Some(cfg.time_dim), rng))
                    .collect()
            };
            let mk_attn = |store: &mut ParamStore<T>, tag: &str, rng: &mut R| -> Vec<AttnBlock> {
                if !attention {
                    return Vec::new();
                }
                (0..nb).map(|b| AttnBlock::new(&mut store.scope(&format!("{p}.{tag}{b}")), w, cfg.text_dim, heads, rng)).collect()
            };
            let enc = mk_blocks(store, "enc", rng);
            let enc_attn = mk_attn(store, "enc_attn", rng);
            let dec = mk_blocks(store, "dec", rng);
            let dec_attn = mk_attn(store, "dec_attn", rng);
            let up_out = if i == 0 { w } else { cfg.widths[i - 1] };
            let up = ConvTranspose2d::new(&mut store.scope(&format!("{p}.up")), w, up_out, 2, 2, 0, rng);
            levels.push(Level { down, enc, enc_attn, dec, dec_attn, up, attention });
            cin = w;
        }
        let (semantic_proj, null_semantic) = if sem {
            let proj =
                Linear::new(&mut store.scope(&format!("{prefix}.sem_proj")), SEMANTIC_CHANNELS, cfg.text_dim, true, Init::Default, rng);
            let n = cfg.semantic_size;
            let null = store.scope(prefix).param("null_semantic", Tensor::randn([1, SEMANTIC_CHANNELS, n, n], rng));
            (Some(proj), Some(null))
        } else {
            (None, None)
        };
        let w0 = cfg.widths[0];
        let head_norm = ChannelNorm::new(&mut store.scope(&format!("{prefix}.head_norm")), w0, true);
        let head =
            Conv2d::new(&mut store.scope(&format!("{prefix}.head")), w0, 2 * cfg.latent_channels, 1, 1, 0, Init::Zeros, rng);
        Ok(Self { cfg, time, levels, semantic_proj, null_semantic, head_norm, head, prefix: prefix.to_string() })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn check_shapes(&self, x: &[usize], cond: &BConditioning<'_, impl Scalar>) -> Result<()> {
        let st = self.cfg.stride();
        if x.len() != 4 || x[1] != self.cfg.latent_channels || !x[2].is_multiple_of(st) || !x[3].is_multiple_of(st) {
            return Err(Error::Shape(format!(
                "stage B input {x:?}: expected [N, {}, H, W] with H, W divisible by {st}",
                self.cfg.latent_channels
            )));
        }
        let t = cond.text.shape();
        if t.len() != 3 || t[0] != x[0] || t[2] != self.cfg.text_dim {
            return Err(Error::Shape(format!("stage B text conditioning {t:?} for batch {}", x[0])));
        }
        if let Some(sem) = cond.semantic {
            let s = sem.shape();
            if s.len() != 4 || s[0] != x[0] || s[1] != SEMANTIC_CHANNELS {
                return Err(Error::Shape(format!("stage B semantic conditioning {s:?} for batch {}", x[0])));
            }
        }
        Ok(())
    }

    /// The learned semantic null broadcast over a batch.
    pub fn null_semantic_var<T: Scalar>(&self, s: &Session<'_, T>, n: usize) -> Result<Option<Var<T>>> {
        let Some(id) = self.null_semantic else { return Ok(None) };
        let one = s.param(id);
        Ok(Some(Var::concat(&vec![&one; n], 0)?))
    }

    /// Replaces the semantic latent of flagged samples by the learned null.
    pub fn drop_semantic<T: Scalar>(&self, s: &Session<'_, T>, semantic: &Var<T>, flags: &[bool]) -> Result<Var<T>> {
        match self.null_semantic {
            Some(id) => select_null(semantic, &s.param(id), flags),
            None => Ok(semantic.clone()),
        }
    }

    /// A/B prediction for noised latents `x_t` at per-sample times `ts`.
    pub fn predict<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        x_t: &Var<T>,
        ts: &[f64],
        cond: &BConditioning<'_, T>,
    ) -> Result<AbPrediction<Var<T>>> {
        self.check_shapes(x_t.shape(), cond)?;
        let n = x_t.shape()[0];
        if ts.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", ts.len())));
        }
        let emb = self.time.forward(s, ts)?;
        let (semantic, context) = if self.cfg.conditioning.uses_semantic() {
            let sem = match cond.semantic {
                Some(v) => v.clone(),
                None => self.null_semantic_var(s, n)?.expect("semantic null exists"),
            };
            let tokens = self.semantic_proj.as_ref().expect("projection").forward(s, &flatten_semantic_var(&sem)?)?;
            let ctx = if self.cfg.conditioning.uses_text() { Var::concat(&[cond.text, &tokens], 1)? } else { tokens };
            (Some(sem), ctx)
        } else {
            (None, cond.text.clone())
        };
        let resized = |h: &Var<T>| -> Result<Option<Var<T>>> {
            match &semantic {
                Some(sem) => {
                    let (hh, ww) = (h.shape()[2], h.shape()[3]);
                    if sem.shape()[2] == hh && sem.shape()[3] == ww {
                        Ok(Some(sem.clone()))
                    } else {
                        Ok(Some(sem.resize(hh, ww, ResampleKernel::Bicubic)?))
                    }
                }
                None => Ok(None),
            }
        };
        let mut h = x_t.clone();
        let mut skips = Vec::with_capacity(self.levels.len());
        for lv in &self.levels {
            h = lv.down.forward(s, &h)?;
            let extra = if lv.attention { resized(&h)? } else { None };
            for (b, blk) in lv.enc.iter().enumerate() {
                h = blk.forward(s, &h, extra.as_ref(), Some(&emb))?;
                if lv.attention {
                    h = lv.enc_attn[b].forward(s, &h, &context)?;
                }
            }
            skips.push(h.clone());
        }
        let deepest = self.levels.len() - 1;
        for (i, (lv, skip)) in self.levels.iter().zip(skips).enumerate().rev() {
            // the deepest skip is the current activation itself
            if i != deepest {
                h = h.add(&skip)?;
            }
            let extra = if lv.attention { resized(&h)? } else { None };
            for (b, blk) in lv.dec.iter().enumerate() {
                h = blk.forward(s, &h, extra.as_ref(), Some(&emb))?;
                if lv.attention {
                    h = lv.dec_attn[b].forward(s, &h, &context)?;
                }
            }
            h = lv.up.forward(s, &h)?;
        }
        let out = self.head.forward(s, &self.head_norm.forward(s, &h)?)?;
        split_ab(&out)
    }
}

/// Per-sample augmentation decision: `Some(t')` means noise at level `t'`.
pub fn augmentation_plan<R: Rng + ?Sized>(rng: &mut R, n: usize, probability: f64, max_t: f64) -> Result<Vec<Option<f64>>> {
    if !(0.0..=1.0).contains(&probability) || !(0.0..=1.0).contains(&max_t) {
        return Err(Error::Domain(format!("augmentation probability {probability} / max_t {max_t} outside [0, 1]")));
    }
    Ok((0..n)
        .map(|_| {
            let hit = rng.gen::<f64>() < probability;
            let t = rng.gen::<f64>() * max_t;
            hit.then_some(t)
        })
        .collect())
}

/// Noises conditioning latents according to `plan`, `[N, ...]`.
pub fn augment_conditioning<T: Scalar, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    semantic: &Tensor<T>,
    plan: &[Option<f64>],
    rng: &mut R,
) -> Result<Tensor<T>> {
    let n = semantic.dim(0);
    if plan.len() != n {
        return Err(Error::Shape(format!("{} plan entries for batch of {n}", plan.len())));
    }
    let mut parts = Vec::with_capacity(n);
    for (i, p) in plan.iter().enumerate() {
        let x = semantic.index0(i);
        parts.push(match p {
            Some(t) => forward_noise(schedule, &x, *t, &Tensor::randn(x.shape().to_vec(), rng))?,
            None => x,
        });
    }
    Ok(Tensor::stack(&parts)?)
}

/// Differentiable counterpart of [`augment_conditioning`]: gradients reach
/// the semantic latent through the `√ᾱ` scaling.
pub fn augment_conditioning_var<T: Scalar, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    semantic: &Var<T>,
    plan: &[Option<f64>],
    rng: &mut R,
) -> Result<Var<T>> {
    let shape = semantic.shape().to_vec();
    let n = shape[0];
    if plan.len() != n {
        return Err(Error::Shape(format!("{} plan entries for batch of {n}", plan.len())));
    }
    if plan.iter().all(|p| p.is_none()) {
        return Ok(semantic.clone());
    }
    let per = semantic.value().numel() / n;
    let mut scale = Vec::with_capacity(n);
    let mut noise = vec![T::zero(); n * per];
    for (i, p) in plan.iter().enumerate() {
        match p {
            Some(t) => {
                let ab = schedule.alpha_bar(*t)?;
                scale.push(ab.sqrt());
                let sd = T::c((1.0 - ab).sqrt());
                let eps = Tensor::<T>::randn([per], rng);
                for (d, e) in noise[i * per..(i + 1) * per].iter_mut().zip(eps.data()) {
                    *d = sd * *e;
                }
            }
            None => scale.push(1.0),
        }
    }
    let mut sshape = vec![1; shape.len()];
    sshape[0] = n;
    let scaled = semantic.mul(&Var::constant(Tensor::from_f64(sshape, &scale)))?;
    Ok(scaled.add(&Var::constant(Tensor::new(shape, noise)))?)
}
