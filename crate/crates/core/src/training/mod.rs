//! Training loops for every stage: batch sampling, AdamW with linear
//! warm-up, loss logging, periodic atomic checkpoints and exact resume.

pub mod checkpoint;
pub mod dataset;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wurstkit_tensor::optim::{clip_grad_norm, warmup_lr, AdamW, AdamWConfig};
use wurstkit_tensor::{ParamId, ParamStore, Session, Tensor, Var};

use crate::diffusion::{ab_to_epsilon_var, forward_noise_batch, weighted_loss_var};
use crate::stage_a::maybe_drop_quantization;
use crate::stage_b::{augment_conditioning_var, augmentation_plan, BConditioning};
use crate::system::{Stage, System};
use crate::text::maybe_null;
use crate::{Error, Result};
use checkpoint::{Checkpoint, RngState};
use dataset::ImageCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// 0 disables periodic checkpoints (a final one is still written).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 1e-4,
            warmup_steps: 500,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: None,
            checkpoint_every: 500,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train steps and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train lr must be > 0".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("train log_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        warmup_lr(self.lr, self.warmup_steps, step)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

pub fn loss_csv(rows: &[LossRecord]) -> String {
    let mut out = String::from("step,term,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.term, r.value));
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut parts = line.split(',');
        let bad = || Error::Config(format!("loss csv line {}: malformed", i + 1));
        let step = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let term = parts.next().ok_or_else(bad)?.to_string();
        let value = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        rows.push(LossRecord { step, term, value });
    }
    Ok(rows)
}

/// Where a run writes `<stage>.ckpt` and `<stage>_loss.csv`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{}.ckpt", stage.name()))
    }

    pub fn loss_csv(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{}_loss.csv", stage.name()))
    }
}

pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub checkpoint: Checkpoint,
}

impl TrainReport {
    /// Values of one term in step order.
    pub fn series(&self, term: &str) -> Vec<f64> {
        self.losses.iter().filter(|r| r.term == term).map(|r| r.value).collect()
    }
}

const DISC_PREFIX: &str = "optim.disc.";

/// Mutable state of a run that must survive checkpoint/resume.
struct RunState {
    step: u64,
    rng: ChaCha8Rng,
    opt: AdamW<f32>,
    disc_opt: AdamW<f32>,
    usage: Vec<u64>,
    losses: Vec<LossRecord>,
}

/// Trains `stage` of `sys` on `data`. With `resume`, continues from a
/// checkpoint written by an earlier run of the same configuration.
pub fn run_training(
    sys: &mut System,
    stage: Stage,
    cfg: &TrainConfig,
    data: &ImageCache<f32>,
    out: Option<&RunOutput>,
    resume: Option<&Checkpoint>,
) -> Result<TrainReport> {
    cfg.validate()?;
    sys.require_upstream(stage)?;
    if data.is_empty() {
        return Err(Error::Precondition("empty training corpus".into()));
    }
    let mut st = RunState {
        step: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        opt: AdamW::new(cfg.adamw()),
        disc_opt: AdamW::new(cfg.adamw()),
        usage: vec![0; sys.cfg.stage_a.codebook_size],
        losses: Vec::new(),
    };
    if let Some(ck) = resume {
        restore(sys, stage, cfg, ck, &mut st, out)?;
    }
    while st.step < cfg.steps {
        let step = st.step;
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| st.rng.gen_range(0..data.len())).collect();
        let images = data.batch(&idx);
        let captions: Vec<String> = idx.iter().map(|&i| data.captions[i].clone()).collect();
        let terms = train_step(sys, stage, cfg, &mut st, step, &images, &captions)?;
        for (term, value) in &terms {
            if !value.is_finite() {
                return Err(Error::NonFinite { step, term: term.to_string() });
            }
        }
        if step.is_multiple_of(cfg.log_every) || step + 1 == cfg.steps {
            for (term, value) in terms {
                st.losses.push(LossRecord { step, term: term.to_string(), value });
            }
        }
        st.step += 1;
        if cfg.checkpoint_every > 0 && st.step.is_multiple_of(cfg.checkpoint_every) && st.step < cfg.steps {
            if let Some(o) = out {
                save(sys, stage, cfg, &st, o)?;
            }
        }
        if step.is_multiple_of(100) {
            log::info!("{stage} step {step}: {}", st.losses.last().map(|r| r.value).unwrap_or(f64::NAN));
        }
    }
    sys.ready.insert(stage);
    let checkpoint = snapshot(sys, stage, cfg, &st)?;
    if let Some(o) = out {
        checkpoint.save(&o.checkpoint(stage))?;
        crate::io::atomic_write(&o.loss_csv(stage), loss_csv(&st.losses).as_bytes())?;
    }
    Ok(TrainReport { losses: st.losses, checkpoint })
}

fn snapshot(sys: &System, stage: Stage, cfg: &TrainConfig, st: &RunState) -> Result<Checkpoint> {
    let mut ck = sys.export(stage, st.step)?;
    ck.config = serde_json::json!({ "model": ck.config, "train": cfg });
    ck.rng = Some(RngState::capture(&st.rng));
    let owned = |n: &str| stage.owns(n.trim_start_matches("optim.m.").trim_start_matches("optim.v."));
    for (name, t) in st.opt.state_tensors(&sys.store) {
        if owned(&name) {
            ck.insert(name, t)?;
        }
    }
    for (name, t) in st.disc_opt.state_tensors(&sys.store) {
        ck.insert(format!("{DISC_PREFIX}{}", name.trim_start_matches("optim.")), t)?;
    }
    if stage == Stage::StageA {
        ck.insert("optim.usage", Tensor::new([st.usage.len()], st.usage.iter().map(|&u| u as f32).collect()))?;
    }
    Ok(ck)
}

fn save(sys: &System, stage: Stage, cfg: &TrainConfig, st: &RunState, out: &RunOutput) -> Result<()> {
    snapshot(sys, stage, cfg, st)?.save(&out.checkpoint(stage))?;
    crate::io::atomic_write(&out.loss_csv(stage), loss_csv(&st.losses).as_bytes())
}

fn restore(
    sys: &mut System,
    stage: Stage,
    cfg: &TrainConfig,
    ck: &Checkpoint,
    st: &mut RunState,
    out: Option<&RunOutput>,
) -> Result<()> {
    let model_cfg = ck.config.get("model").cloned().unwrap_or(serde_json::Value::Null);
    let mut model_ck = ck.clone();
    model_ck.config = model_cfg;
    sys.load(stage, &model_ck)?;
    sys.ready.remove(&stage);
    if let Some(saved) = ck.config.get("train") {
        let saved: TrainConfig = serde_json::from_value(saved.clone())?;
        let comparable = TrainConfig { steps: cfg.steps, checkpoint_every: cfg.checkpoint_every, ..saved };
        if &comparable != cfg {
            return Err(Error::Checkpoint("resume requires the same training configuration".into()));
        }
    }
    st.step = ck.step;
    st.rng = ck.rng.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no rng state".into()))?.restore()?;
    let mut gen: HashMap<String, Tensor<f32>> = HashMap::new();
    let mut disc: HashMap<String, Tensor<f32>> = HashMap::new();
    for (name, t) in &ck.tensors {
        if let Some(rest) = name.strip_prefix(DISC_PREFIX) {
            disc.insert(format!("optim.{rest}"), t.clone());
        } else if name.starts_with("optim.m.") || name.starts_with("optim.v.") {
            gen.insert(name.clone(), t.clone());
        }
    }
    st.opt.load_state(&sys.store, ck.step, &gen)?;
    let disc_steps = ck.step.saturating_sub(sys.cfg.stage_a.adversarial_start);
    st.disc_opt.load_state(&sys.store, if stage == Stage::StageA { disc_steps } else { 0 }, &disc)?;
    if let Some(u) = ck.tensors.get("optim.usage") {
        st.usage = u.data().iter().map(|&v| v as u64).collect();
    }
    if let Some(o) = out {
        if let Ok(text) = std::fs::read_to_string(o.loss_csv(stage)) {
            st.losses = parse_loss_csv(&text)?.into_iter().filter(|r| r.step < ck.step).collect();
        }
    }
    Ok(())
}

fn apply_update(
    store: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    mut grads: Vec<(ParamId, Tensor<f32>)>,
    updates: Vec<(ParamId, Tensor<f32>)>,
    keep: impl Fn(&str) -> bool,
    cfg: &TrainConfig,
    step: u64,
) -> Result<()> {
    grads.retain(|(id, _)| keep(store.name(*id)));
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    for (id, v) in updates {
        if keep(store.name(id)) {
            store.set(id, v)?;
        }
    }
    opt.step(store, &grads, cfg.lr_at(step));
    Ok(())
}

type Terms = Vec<(&'static str, f64)>;

fn uniform_times<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

fn train_step(
    sys: &mut System,
    stage: Stage,
    cfg: &TrainConfig,
    st: &mut RunState,
    step: u64,
    images: &Tensor<f32>,
    captions: &[String],
) -> Result<Terms> {
    match stage {
        Stage::StageA => step_a(sys, cfg, st, step, images),
        Stage::StageB | Stage::Baseline => step_b(sys, stage, cfg, st, step, images, captions),
        Stage::StageC => step_c(sys, cfg, st, step, images, captions),
        Stage::Probe => step_probe(sys, cfg, st, step, images),
    }
}

fn step_a(sys: &mut System, cfg: &TrainConfig, st: &mut RunState, step: u64, images: &Tensor<f32>) -> Result<Terms> {
    let acfg = sys.cfg.stage_a.clone();
    let drop = maybe_drop_quantization(&mut st.rng, acfg.quantization_drop)?;
    let (grads, updates, out_terms, recon, latent) = {
        let s = Session::train(&sys.store);
        let out = sys.a.train_forward(&s, images, step, drop)?;
        out.loss.backward();
        if let Some(idx) = &out.indices {
            for &i in idx {
                st.usage[i] += 1;
            }
        }
        let b = out.breakdown;
        let terms: Terms = vec![
            ("total", b.total),
            ("mse", b.mse),
            ("perceptual", b.perceptual),
            ("adversarial", b.adversarial),
            ("codebook", b.codebook),
            ("commitment", b.commitment),
        ];
        (s.grads(), s.take_buffer_updates(), terms, out.reconstruction.value().clone(), out.latent)
    };
    let generator = |n: &str| Stage::StageA.owns(n) && !n.starts_with("disc.");
    apply_update(&mut sys.store, &mut st.opt, grads, updates, generator, cfg, step)?;
    let mut terms = out_terms;
    if acfg.adversarial_weight_at(step) > 0.0 {
        let (g, u, d) = {
            let s = Session::train(&sys.store);
            let d = sys.a.discriminator_loss(&s, images, &recon)?;
            d.backward();
            (s.grads(), s.take_buffer_updates(), d.value().item() as f64)
        };
        apply_update(&mut sys.store, &mut st.disc_opt, g, u, |n| n.starts_with("disc."), cfg, step)?;
        terms.push(("discriminator", d));
    }
    if acfg.revive_every > 0 && (step + 1).is_multiple_of(acfg.revive_every) {
        let revived = sys.a.revive_dead_codes(&mut sys.store, &st.usage, &latent, &mut st.rng);
        terms.push(("revived", revived as f64));
        st.usage.iter_mut().for_each(|u| *u = 0);
    }
    Ok(terms)
}

fn step_b(
    sys: &mut System,
    stage: Stage,
    cfg: &TrainConfig,
    st: &mut RunState,
    step: u64,
    images: &Tensor<f32>,
    captions: &[String],
) -> Result<Terms> {
    let n = images.dim(0);
    let schedule = sys.schedule();
    let (model, text_enc) = match stage {
        Stage::StageB => (&sys.b, &sys.b_text),
        _ => (&sys.baseline, &sys.baseline_text),
    };
    let bcfg = model.cfg.clone();
    let latent = sys.a.encode_images(&sys.store, images)?;
    let rng = &mut st.rng;
    let (grads, updates, loss) = {
        let s = Session::train(&sys.store);
        let semantic = if bcfg.conditioning.uses_semantic() {
            let csc = sys.compressor.encode(&s, images)?;
            let plan = augmentation_plan(rng, n, bcfg.aug_probability, bcfg.aug_max_t)?;
            let csc = augment_conditioning_var(&schedule, &csc, &plan, rng)?;
            let flags = (0..n).map(|_| maybe_null(rng, bcfg.semantic_dropout)).collect::<Result<Vec<_>>>()?;
            Some(model.drop_semantic(&s, &csc, &flags)?)
        } else {
            None
        };
        let tflags = (0..n).map(|_| maybe_null(rng, bcfg.text_dropout)).collect::<Result<Vec<_>>>()?;
        let text = text_enc.encode(&s, captions, &tflags)?;
        let ts = uniform_times(rng, n);
        let eps = Tensor::<f32>::randn(latent.shape().to_vec(), rng);
        let x_t = Var::constant(forward_noise_batch(&schedule, &latent, &ts, &eps)?);
        let pred = model.predict(&s, &x_t, &ts, &BConditioning { semantic: semantic.as_ref(), text: &text })?;
        let loss = weighted_loss_var(&schedule, &eps, &ab_to_epsilon_var(&x_t, &pred)?, &ts)?;
        loss.backward();
        (s.grads(), s.take_buffer_updates(), loss.value().item() as f64)
    };
    apply_update(&mut sys.store, &mut st.opt, grads, updates, |nm| stage.owns(nm), cfg, step)?;
    Ok(vec![("loss", loss)])
}

fn step_c(
    sys: &mut System,
    cfg: &TrainConfig,
    st: &mut RunState,
    step: u64,
    images: &Tensor<f32>,
    captions: &[String],
) -> Result<Terms> {
    let n = images.dim(0);
    let schedule = sys.schedule();
    let x0 = sys.compressor.encode_images(&sys.store, images)?;
    let rng = &mut st.rng;
    let (grads, updates, loss) = {
        let s = Session::train(&sys.store);
        let flags = (0..n).map(|_| maybe_null(rng, sys.c.cfg.text_dropout)).collect::<Result<Vec<_>>>()?;
        let text = sys.c_text.encode(&s, captions, &flags)?;
        let ts = uniform_times(rng, n);
        let eps = Tensor::<f32>::randn(x0.shape().to_vec(), rng);
        let x_t = Var::constant(forward_noise_batch(&schedule, &x0, &ts, &eps)?);
        let pred = sys.c.predict(&s, &x_t, &ts, &text)?;
        let loss = weighted_loss_var(&schedule, &eps, &ab_to_epsilon_var(&x_t, &pred)?, &ts)?;
        loss.backward();
        (s.grads(), s.take_buffer_updates(), loss.value().item() as f64)
    };
    apply_update(&mut sys.store, &mut st.opt, grads, updates, |nm| Stage::StageC.owns(nm), cfg, step)?;
    Ok(vec![("loss", loss)])
}

fn step_probe(sys: &mut System, cfg: &TrainConfig, st: &mut RunState, step: u64, images: &Tensor<f32>) -> Result<Terms> {
    let latent = sys.compressor.encode_images(&sys.store, images)?;
    let (grads, updates, loss) = {
        let s = Session::train(&sys.store);
        let out = sys.probe.forward(&s, &Var::constant(latent))?;
        let target = probe_target(images, out.shape()[2], out.shape()[3])?;
        let loss = out.sub(&Var::constant(target))?.square().mean();
        loss.backward();
        (s.grads(), s.take_buffer_updates(), loss.value().item() as f64)
    };
    let _ = &st.rng;
    apply_update(&mut sys.store, &mut st.opt, grads, updates, |nm| Stage::Probe.owns(nm), cfg, step)?;
    Ok(vec![("mse", loss)])
}

/// Images resized (bicubic) to the probe decoder's output size.
pub fn probe_target(images: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    if images.dim(2) == h && images.dim(3) == w {
        return Ok(images.clone());
    }
    crate::compressor::resize_bicubic(images, h, w)
}

/// Loads the checkpoints of `stages` from `dir` into `sys`.
pub fn load_stages(sys: &mut System, dir: &Path, stages: &[Stage]) -> Result<()> {
    let out = RunOutput::new(dir);
    for &stage in stages {
        let path = out.checkpoint(stage);
        if !path.exists() {
            return Err(Error::Precondition(format!("missing {stage} checkpoint at {}", path.display())));
        }
        load_stage_checkpoint(sys, stage, &Checkpoint::load(&path)?)?;
    }
    Ok(())
}

/// Loads model weights from a training or merged checkpoint.
pub fn load_stage_checkpoint(sys: &mut System, stage: Stage, ck: &Checkpoint) -> Result<()> {
    let mut m = ck.clone();
    if let Some(model) = ck.config.get("model") {
        m.config = model.clone();
    }
    sys.load(stage, &m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule_exact() {
        let cfg = TrainConfig { lr: 1e-4, warmup_steps: 10_000, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert_eq!(cfg.lr_at(10_000), 1e-4);
        assert_eq!(cfg.lr_at(20_000), 1e-4);
        assert_eq!(cfg.lr_at(2_500), 2.5e-5);
    }

    #[test]
    fn csv_roundtrip() {
        let rows = vec![
            LossRecord { step: 0, term: "loss".into(), value: 0.125 },
            LossRecord { step: 1, term: "mse".into(), value: 1e-7 },
        ];
        assert_eq!(parse_loss_csv(&loss_csv(&rows)).unwrap(), rows);
    }
}
