//! All trainable components in one parameter store, with per-stage tensor
//! ownership for checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wurstkit_tensor::{ParamId, ParamStore, Tensor};

use crate::compressor::{CompressorConfig, SemanticCompressor, SEMANTIC_CHANNELS};
use crate::diffusion::{NoiseSchedule, ShapeSpec};
use crate::stage_a::{StageA, StageAConfig, FACTOR};
use crate::stage_b::{StageB, StageBConfig};
use crate::stage_c::{ProbeDecoder, ProbeDecoderConfig, StageC, StageCConfig};
use crate::text::{TextConfig, TextEncoder};
use crate::training::checkpoint::Checkpoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    StageA,
    StageB,
    StageC,
    Baseline,
    Probe,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::StageA, Stage::StageB, Stage::StageC, Stage::Baseline, Stage::Probe];

    pub fn name(self) -> &'static str {
        match self {
            Stage::StageA => "stage-a",
            Stage::StageB => "stage-b",
            Stage::StageC => "stage-c",
            Stage::Baseline => "baseline",
            Stage::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected stage-a, stage-b, stage-c, baseline or probe)")))
    }

    /// Name prefixes of the tensors this stage trains and checkpoints.
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::StageA => &["enc.", "dec.", "codebook", "disc.", "percep."],
            // the compressor is finetuned together with Stage B
            Stage::StageB => &["b.", "csc."],
            Stage::StageC => &["c."],
            Stage::Baseline => &["base."],
            Stage::Probe => &["probe."],
        }
    }

    pub fn owns(self, name: &str) -> bool {
        self.prefixes().iter().any(|p| name.starts_with(p))
    }

    /// Stages whose checkpoints must be loaded before training this one.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::StageA => &[],
            Stage::StageB | Stage::Baseline => &[Stage::StageA],
            Stage::StageC | Stage::Probe => &[Stage::StageB],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub image_size: usize,
    pub schedule_offset: f64,
    pub stage_a: StageAConfig,
    pub compressor: CompressorConfig,
    pub text: TextConfig,
    pub stage_b: StageBConfig,
    pub stage_c: StageCConfig,
    pub baseline: StageBConfig,
    pub probe: ProbeDecoderConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            schedule_offset: 0.008,
            stage_a: StageAConfig::default(),
            compressor: CompressorConfig::default(),
            text: TextConfig::default(),
            stage_b: StageBConfig::default(),
            stage_c: StageCConfig::default(),
            baseline: StageBConfig::baseline(),
            probe: ProbeDecoderConfig::default(),
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage_a.validate()?;
        self.compressor.validate()?;
        self.text.validate()?;
        self.stage_b.validate()?;
        self.stage_c.validate()?;
        self.baseline.validate()?;
        self.probe.validate()?;
        NoiseSchedule::cosine(self.schedule_offset)?;
        let lat = self.latent_size()?;
        if lat % self.stage_b.stride() != 0 || lat % self.baseline.stride() != 0 {
            return Err(Error::Config(format!("stage A latent {lat} not divisible by the stage B stride")));
        }
        if self.stage_b.semantic_size != self.compressor.latent_size() {
            return Err(Error::Config(format!(
                "stage_b.semantic_size {} differs from the compressor latent size {}",
                self.stage_b.semantic_size,
                self.compressor.latent_size()
            )));
        }
        if self.stage_b.latent_channels != self.stage_a.latent_channels
            || self.baseline.latent_channels != self.stage_a.latent_channels
        {
            return Err(Error::Config("stage B latent_channels must equal stage A latent_channels".into()));
        }
        for (name, d) in [("stage_b", self.stage_b.text_dim), ("stage_c", self.stage_c.text_dim), ("baseline", self.baseline.text_dim)] {
            if d != self.text.dim {
                return Err(Error::Config(format!("{name}.text_dim {d} differs from text.dim {}", self.text.dim)));
            }
        }
        Ok(())
    }

    pub fn latent_size(&self) -> Result<usize> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(FACTOR) {
            return Err(Error::Config(format!("image_size {} not divisible by {FACTOR}", self.image_size)));
        }
        Ok(self.image_size / FACTOR)
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::cosine(self.schedule_offset).expect("validated offset")
    }

    pub fn stage_a_shape(&self) -> Result<ShapeSpec> {
        ShapeSpec::new(self.image_size, self.image_size, 3, self.stage_a.latent_channels, FACTOR)
    }

    /// Pixel geometry against the semantic latent.
    pub fn semantic_shape(&self) -> Result<ShapeSpec> {
        let h = self.compressor.latent_size();
        if h == 0 || !self.image_size.is_multiple_of(h) {
            return Err(Error::Config(format!("image_size {} not a multiple of semantic size {h}", self.image_size)));
        }
        ShapeSpec::new(self.image_size, self.image_size, 3, SEMANTIC_CHANNELS, self.image_size / h)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Seed for a named sub-stream of a run seed.
pub fn component_seed(seed: u64, tag: &str) -> u64 {
    crate::text::fnv1a(tag.as_bytes()) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct System {
    pub cfg: SystemConfig,
    pub store: ParamStore<f32>,
    pub a: StageA,
    pub compressor: SemanticCompressor,
    pub b: StageB,
    pub b_text: TextEncoder,
    pub c: StageC,
    pub c_text: TextEncoder,
    pub baseline: StageB,
    pub baseline_text: TextEncoder,
    pub probe: ProbeDecoder,
    /// Stages holding trained weights (loaded or trained in this process).
    pub ready: std::collections::BTreeSet<Stage>,
}

impl System {
    pub fn new(cfg: SystemConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let rng = |tag: &str| ChaCha8Rng::seed_from_u64(component_seed(seed, tag));
        let a = StageA::new(cfg.stage_a.clone(), &mut store, &mut rng("stage-a"))?;
        let compressor = SemanticCompressor::new(cfg.compressor.clone(), &mut store, &mut rng("compressor"))?;
        let b = StageB::new(cfg.stage_b.clone(), &mut store, "b", &mut rng("stage-b"))?;
        let b_text = TextEncoder::new(cfg.text.clone(), &mut store, "b.text", &mut rng("stage-b-text"))?;
        let c = StageC::new(cfg.stage_c.clone(), &mut store, "c", &mut rng("stage-c"))?;
        let c_text = TextEncoder::new(cfg.text.clone(), &mut store, "c.text", &mut rng("stage-c-text"))?;
        let baseline = StageB::new(cfg.baseline.clone(), &mut store, "base", &mut rng("baseline"))?;
        let baseline_text = TextEncoder::new(cfg.text.clone(), &mut store, "base.text", &mut rng("baseline-text"))?;
        let probe = ProbeDecoder::new(cfg.probe.clone(), &mut store, "probe", &mut rng("probe"))?;
        Ok(Self { cfg, store, a, compressor, b, b_text, c, c_text, baseline, baseline_text, probe, ready: Default::default() })
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.cfg.schedule()
    }

    pub fn stage_ids(&self, stage: Stage) -> Vec<ParamId> {
        self.store.ids().filter(|&id| stage.owns(self.store.name(id))).collect()
    }

    pub fn num_parameters(&self, stage: Stage) -> usize {
        self.stage_ids(stage)
            .into_iter()
            .filter(|&id| self.store.is_trainable(id))
            .map(|id| self.store.get(id).numel())
            .sum()
    }

    /// Tensors owned by `stage` as a checkpoint at `step`.
    pub fn export(&self, stage: Stage, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(stage.name(), step, self.stage_config(stage));
        for id in self.stage_ids(stage) {
            ck.insert(self.store.name(id), self.store.get(id).clone())?;
        }
        Ok(ck)
    }

    /// The configuration sections a stage's weights depend on.
    pub fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            Stage::StageA => serde_json::json!({ "image_size": c.image_size, "stage_a": v(&c.stage_a) }),
            Stage::StageB => serde_json::json!({ "stage_b": v(&c.stage_b), "compressor": v(&c.compressor), "text": v(&c.text) }),
            Stage::StageC => serde_json::json!({ "stage_c": v(&c.stage_c), "text": v(&c.text) }),
            Stage::Baseline => serde_json::json!({ "baseline": v(&c.baseline), "text": v(&c.text) }),
            Stage::Probe => serde_json::json!({ "probe": v(&c.probe) }),
        }
    }

    /// Loads a stage checkpoint; every owned tensor must be present with the
    /// right shape and the architecture sections must match.
    pub fn load(&mut self, stage: Stage, ck: &Checkpoint) -> Result<()> {
        if ck.stage != stage.name() {
            return Err(Error::Checkpoint(format!("expected a {} checkpoint, got {}", stage.name(), ck.stage)));
        }
        let expected = self.stage_config(stage);
        if let (Some(want), Some(got)) = (expected.as_object(), ck.config.as_object()) {
            for (k, v) in want {
                if got.get(k) != Some(v) {
                    return Err(Error::Checkpoint(format!("checkpoint config section {k:?} differs from the current config")));
                }
            }
        }
        for id in self.stage_ids(stage) {
            let name = self.store.name(id).to_string();
            let t = ck.get(&name)?;
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape(), self.store.get(id).shape())));
            }
            self.store.set(id, t.clone())?;
        }
        self.ready.insert(stage);
        Ok(())
    }

    /// Error unless every upstream stage of `stage` has trained weights.
    pub fn require_upstream(&self, stage: Stage) -> Result<()> {
        for up in stage.upstream() {
            if !self.ready.contains(up) {
                return Err(Error::Precondition(format!("{stage} needs a trained {up} checkpoint")));
            }
        }
        Ok(())
    }

    pub fn set_tensor(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        let id = self.store.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        self.store.set(id, t)?;
        Ok(())
    }
}

fn v<S: Serialize>(x: &S) -> serde_json::Value {
    serde_json::to_value(x).expect("config serializes")
}
