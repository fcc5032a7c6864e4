//! Text-to-image sampling: Stage C DDPM loop over semantic latents, Stage B
//! DDPM loop over Stage A latents initialised from random codebook tokens,
//! then the Stage A decoder. Also spatial-compression accounting.

use std::cell::Cell;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wurstkit_tensor::{Session, Tensor, Var};

use crate::compressor::SEMANTIC_CHANNELS;
use crate::diffusion::{ab_to_epsilon, cfg_combine, ddpm_step, GuidanceBranches, ShapeSpec};
use crate::stage_a::lookup;
use crate::stage_b::{BConditioning, StageB};
use crate::system::{component_seed, Stage, System};
use crate::text::TextEncoder;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps_c: usize,
    pub steps_b: usize,
    pub guidance_c: f64,
    pub guidance_b: f64,
    pub seed: u64,
    /// Standardise the codebook-token initial latent of Stage B per sample.
    pub rescale_init: bool,
    /// The unconditional Stage B branch also replaces C_sc by its learned null.
    pub uncond_drops_semantic: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps_c: 60,
            steps_b: 12,
            guidance_c: 4.0,
            guidance_b: 4.0,
            seed: 0,
            rescale_init: true,
            uncond_drops_semantic: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_c == 0 || self.steps_b == 0 {
            return Err(Error::Config("sampler step counts must be >= 1".into()));
        }
        for w in [self.guidance_c, self.guidance_b] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("guidance scale {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Denoiser forward passes per generated image.
    pub fn expected_passes(&self) -> usize {
        self.steps_c * GuidanceBranches::for_scale(self.guidance_c).passes()
            + self.steps_b * GuidanceBranches::for_scale(self.guidance_b).passes()
    }

    /// Fraction of denoising steps spent in Stage C.
    pub fn stage_c_share(&self) -> f64 {
        self.steps_c as f64 / (self.steps_c + self.steps_b) as f64
    }
}

/// Denoiser evaluations, one per branch and step (a batched call counts once).
#[derive(Debug, Default)]
pub struct PassCounter {
    stage_c: Cell<usize>,
    stage_b: Cell<usize>,
}

impl PassCounter {
    pub fn stage_c(&self) -> usize {
        self.stage_c.get()
    }

    pub fn stage_b(&self) -> usize {
        self.stage_b.get()
    }

    pub fn total(&self) -> usize {
        self.stage_c() + self.stage_b()
    }
}

/// One independent random stream per sample, so that a sample does not
/// depend on the size of the batch it was drawn in.
fn sample_rngs(seed: u64, tag: &str, n: usize) -> Vec<ChaCha8Rng> {
    (0..n).map(|i| ChaCha8Rng::seed_from_u64(component_seed(seed, &format!("{tag}/{i}")))).collect()
}

fn randn_batch(rngs: &mut [ChaCha8Rng], shape: &[usize]) -> Result<Tensor<f32>> {
    let per: Vec<usize> = shape[1..].to_vec();
    let parts: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| Tensor::randn(per.clone(), r)).collect();
    Ok(Tensor::stack(&parts)?)
}

fn guided_eps(
    w: f64,
    x: &Tensor<f32>,
    mut eval: impl FnMut(&Tensor<f32>, bool) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    match GuidanceBranches::for_scale(w) {
        GuidanceBranches::Uncond => eval(x, false),
        GuidanceBranches::Cond => eval(x, true),
        GuidanceBranches::Both => {
            let cond = eval(x, true)?;
            let uncond = eval(x, false)?;
            cfg_combine(&uncond, &cond, w)
        }
    }
}

fn check_ready(sys: &System, stages: &[Stage]) -> Result<()> {
    for s in stages {
        if !sys.ready.contains(s) {
            return Err(Error::Precondition(format!("{s} weights are not loaded")));
        }
    }
    Ok(())
}

/// Samples semantic latents `[N, 16, h_c, w_c]`, one per prompt.
pub fn sample_stage_c<S: AsRef<str>>(
    sys: &System,
    prompts: &[S],
    cfg: &SamplerConfig,
    counter: &PassCounter,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    check_ready(sys, &[Stage::StageC])?;
    let n = prompts.len();
    let hc = sys.cfg.compressor.latent_size();
    let grid = sys.schedule().grid(cfg.steps_c)?;
    let cond_text = Var::constant(sys.c_text.encode_tensor(&sys.store, prompts)?);
    let null_text = Var::constant(sys.c_text.null_batch(&sys.store, n));
    let mut rngs = sample_rngs(cfg.seed, "stage-c", n);
    let shape = [n, SEMANTIC_CHANNELS, hc, hc];
    let mut x = randn_batch(&mut rngs, &shape)?;
    let s = Session::eval(&sys.store);
    for i in (1..=grid.steps()).rev() {
        let ts = vec![grid.t(i); n];
        let eps = guided_eps(cfg.guidance_c, &x, |x, cond| {
            counter.stage_c.set(counter.stage_c.get() + 1);
            let xv = Var::constant(x.clone());
            let pred = sys.c.predict(&s, &xv, &ts, if cond { &cond_text } else { &null_text })?;
            ab_to_epsilon(x, &pred.map(|v| v.value().clone()))
        })?;
        let noise = randn_batch(&mut rngs, &shape)?;
        x = ddpm_step(&grid, &x, &eps, i, &noise)?;
    }
    finite(&x, "stage C sample")?;
    Ok(x)
}

/// Random codebook tokens per cell, looked up to `[N, z, h, w]`; optionally
/// standardised per sample to zero mean and unit variance.
pub fn init_stage_b_latents<R: Rng + ?Sized>(
    codebook: &Tensor<f32>,
    n: usize,
    h: usize,
    w: usize,
    rescale: bool,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let k = codebook.dim(0);
    if k == 0 {
        return Err(Error::Shape("empty codebook".into()));
    }
    let idx: Vec<usize> = (0..n * h * w).map(|_| rng.gen_range(0..k)).collect();
    let mut x = lookup(codebook, &idx, n, h, w)?;
    if rescale {
        let per = x.numel() / n.max(1);
        for chunk in x.data_mut().chunks_mut(per) {
            standardize(chunk);
        }
    }
    Ok(x)
}

fn standardize(v: &mut [f32]) {
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / v.len() as f64;
    if var > 0.0 {
        let sd = var.sqrt();
        v.iter_mut().for_each(|x| *x = ((*x as f64 - m) / sd) as f32);
    }
}

/// Which Stage B network to sample with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refiner {
    StageB,
    /// Text-only Stage B trained without semantic conditioning.
    Baseline,
}

impl Refiner {
    fn parts(self, sys: &System) -> (&StageB, &TextEncoder, Stage) {
        match self {
            Refiner::StageB => (&sys.b, &sys.b_text, Stage::StageB),
            Refiner::Baseline => (&sys.baseline, &sys.baseline_text, Stage::Baseline),
        }
    }
}

/// Samples Stage A latents conditioned on `semantic` (ignored by a refiner
/// without semantic conditioning) and the prompts.
pub fn sample_stage_b<S: AsRef<str>>(
    sys: &System,
    refiner: Refiner,
    semantic: Option<&Tensor<f32>>,
    prompts: &[S],
    cfg: &SamplerConfig,
    counter: &PassCounter,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let (model, text, stage) = refiner.parts(sys);
    check_ready(sys, &[Stage::StageA, stage])?;
    let n = prompts.len();
    let uses_sem = model.cfg.conditioning.uses_semantic();
    let semantic = match (uses_sem, semantic) {
        (true, Some(sem)) => {
            let hc = sys.cfg.compressor.latent_size();
            if sem.shape() != [n, SEMANTIC_CHANNELS, hc, hc] {
                return Err(Error::Shape(format!(
                    "semantic latent {:?} does not match [{n}, {SEMANTIC_CHANNELS}, {hc}, {hc}]",
                    sem.shape()
                )));
            }
            Some(Var::constant(sem.clone()))
        }
        (true, None) => return Err(Error::Precondition("stage B needs a semantic latent".into())),
        (false, _) => None,
    };
    let lat = sys.cfg.latent_size()?;
    let grid = sys.schedule().grid(cfg.steps_b)?;
    let cond_text = Var::constant(text.encode_tensor(&sys.store, prompts)?);
    let null_text = Var::constant(text.null_batch(&sys.store, n));
    let s = Session::eval(&sys.store);
    let null_sem = if cfg.uncond_drops_semantic { model.null_semantic_var(&s, n)? } else { semantic.clone() };
    let mut init_rng = ChaCha8Rng::seed_from_u64(component_seed(cfg.seed, "stage-b/init"));
    let codebook = sys.store.get(sys.a.codebook);
    let mut x = init_stage_b_latents(codebook, n, lat, lat, cfg.rescale_init, &mut init_rng)?;
    let shape = x.shape().to_vec();
    let mut rngs = sample_rngs(cfg.seed, "stage-b", n);
    for i in (1..=grid.steps()).rev() {
        let ts = vec![grid.t(i); n];
        let eps = guided_eps(cfg.guidance_b, &x, |x, cond| {
            counter.stage_b.set(counter.stage_b.get() + 1);
            let xv = Var::constant(x.clone());
            let c = if cond {
                BConditioning { semantic: semantic.as_ref(), text: &cond_text }
            } else {
                BConditioning { semantic: null_sem.as_ref(), text: &null_text }
            };
            let pred = model.predict(&s, &xv, &ts, &c)?;
            ab_to_epsilon(x, &pred.map(|v| v.value().clone()))
        })?;
        let noise = randn_batch(&mut rngs, &shape)?;
        x = ddpm_step(&grid, &x, &eps, i, &noise)?;
    }
    finite(&x, "stage B sample")?;
    Ok(x)
}

fn finite(x: &Tensor<f32>, what: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} contains non-finite values")))
    }
}

pub struct Generation {
    /// `[N, 3, H, W]` in `[0, 1]`.
    pub images: Tensor<f32>,
    pub semantic: Tensor<f32>,
    pub latents: Tensor<f32>,
    pub record: GenerationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompts: Vec<String>,
    pub seed: u64,
    pub config: SamplerConfig,
    pub stage_c_passes: usize,
    pub stage_b_passes: usize,
    pub total_passes: usize,
    pub stage_c_steps: usize,
    pub stage_b_steps: usize,
    pub wall_seconds: f64,
}

/// Stage C → Stage B → Stage A decode for a batch of prompts.
pub fn generate<S: AsRef<str>>(sys: &System, prompts: &[S], cfg: &SamplerConfig) -> Result<Generation> {
    if prompts.is_empty() {
        return Err(Error::Domain("no prompts".into()));
    }
    let start = Instant::now();
    let counter = PassCounter::default();
    let semantic = sample_stage_c(sys, prompts, cfg, &counter)?;
    let latents = sample_stage_b(sys, Refiner::StageB, Some(&semantic), prompts, cfg, &counter)?;
    let images = sys.a.decode_latents(&sys.store, &latents)?;
    let record = GenerationRecord {
        prompts: prompts.iter().map(|p| p.as_ref().to_string()).collect(),
        seed: cfg.seed,
        config: cfg.clone(),
        stage_c_passes: counter.stage_c(),
        stage_b_passes: counter.stage_b(),
        total_passes: counter.total(),
        stage_c_steps: cfg.steps_c,
        stage_b_steps: cfg.steps_b,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Generation { images, semantic, latents, record })
}

/// Stage B reconstruction path: compress real images, refine, decode.
pub fn reconstruct<S: AsRef<str>>(
    sys: &System,
    images: &Tensor<f32>,
    prompts: &[S],
    cfg: &SamplerConfig,
) -> Result<Tensor<f32>> {
    check_ready(sys, &[Stage::StageA, Stage::StageB])?;
    let semantic = sys.compressor.encode_images(&sys.store, images)?;
    let counter = PassCounter::default();
    let latents = sample_stage_b(sys, Refiner::StageB, Some(&semantic), prompts, cfg, &counter)?;
    sys.a.decode_latents(&sys.store, &latents)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub from: usize,
    pub to: usize,
    pub floor: usize,
    pub exact: f64,
}

impl Ratio {
    pub fn new(from: usize, to: usize) -> Result<Self> {
        if from == 0 || to == 0 {
            return Err(Error::Shape("compression ratio of a zero dimension".into()));
        }
        Ok(Self { from, to, floor: from / to, exact: from as f64 / to as f64 })
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} -> {}: {}:1 (exact {:.2})", self.from, self.to, self.floor, self.exact)
    }
}

/// Spatial (per side) compression ratios of the shape chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub stage_a: Ratio,
    pub semantic: Ratio,
    pub a_to_semantic: Ratio,
}

pub fn compression_report(stage_a: &ShapeSpec, semantic: &ShapeSpec) -> Result<CompressionReport> {
    if stage_a.height != semantic.height {
        return Err(Error::Shape(format!(
            "inconsistent shape chain: pixel heights {} and {}",
            stage_a.height, semantic.height
        )));
    }
    Ok(CompressionReport {
        stage_a: Ratio::new(stage_a.height, stage_a.latent_height)?,
        semantic: Ratio::new(semantic.height, semantic.latent_height)?,
        a_to_semantic: Ratio::new(stage_a.latent_height, semantic.latent_height)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_examples() {
        let a = ShapeSpec::new(1024, 1024, 3, 4, 4).unwrap();
        let c = ShapeSpec { latent_height: 24, latent_width: 24, latent_channels: 16, ..a };
        let r = compression_report(&a, &c).unwrap();
        assert_eq!(r.semantic.floor, 42);
        assert!((r.semantic.exact - 42.666_666_666_666_664).abs() < 1e-12);
        assert_eq!(r.stage_a.floor, 4);
        let a = ShapeSpec::new(64, 64, 3, 4, 4).unwrap();
        let c = ShapeSpec { latent_height: 4, latent_width: 4, ..a };
        assert_eq!(compression_report(&a, &c).unwrap().semantic.floor, 16);
        assert!(Ratio::new(0, 4).is_err());
    }

    #[test]
    fn pass_accounting() {
        let cfg = SamplerConfig::default();
        assert_eq!(cfg.expected_passes(), 144);
        assert_eq!(cfg.stage_c_share(), 60.0 / 72.0);
        let no_cfg = SamplerConfig { guidance_c: 1.0, guidance_b: 0.0, ..cfg };
        assert_eq!(no_cfg.expected_passes(), 72);
    }

    #[test]
    fn token_init_rows_and_uniformity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Tensor::<f32>::randn([8, 4], &mut rng);
        let x = init_stage_b_latents(&cb, 2, 5, 5, false, &mut rng).unwrap();
        for n in 0..2 {
            for p in 0..25 {
                let v: Vec<f32> = (0..4).map(|c| x.data()[n * 100 + c * 25 + p]).collect();
                assert!((0..8).any(|k| cb.data()[k * 4..k * 4 + 4] == v[..]));
            }
        }
        let one = Tensor::<f32>::new([1, 4], vec![0.3, -0.1, 0.2, 0.9]);
        let x = init_stage_b_latents(&one, 1, 3, 3, false, &mut rng).unwrap();
        for c in 0..4 {
            assert!(x.data()[c * 9..c * 9 + 9].iter().all(|&v| v == one.data()[c]));
        }
        let mut counts = [0usize; 8];
        let n = 100_000;
        let x = init_stage_b_latents(&cb, 1, 1, n, false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for i in 0..n {
            let k = (0..8).find(|&k| (0..4).all(|c| x.data()[c * n + i] == cb.data()[k * 4 + c])).unwrap();
            counts[k] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.125).abs() < 0.005);
        }
    }

    #[test]
    fn rescaled_init_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = Tensor::<f32>::randn([16, 4], &mut rng).scale(0.01);
        let x = init_stage_b_latents(&cb, 3, 4, 4, true, &mut rng).unwrap();
        for chunk in x.data().chunks(64) {
            let m = chunk.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            let v = chunk.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4);
        }
    }
}
