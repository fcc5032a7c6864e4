//! The JSON run configuration: one optional section per component, unknown
//! keys rejected, versioned by `schema_version`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compressor::CompressorConfig;
use crate::eval::extractor::ExtractorConfig;
use crate::pipeline::SamplerConfig;
use crate::stage_a::StageAConfig;
use crate::stage_b::StageBConfig;
use crate::stage_c::{ProbeDecoderConfig, StageCConfig};
use crate::system::{Stage, SystemConfig};
use crate::text::TextConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesSection {
    pub image_size: usize,
}

impl Default for ShapesSection {
    fn default() -> Self {
        Self { image_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub offset: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { offset: 0.008 }
    }
}

/// Per-stage training recipes. A partial stage entry overrides only the
/// keys it names; the rest keep that stage's defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSection {
    pub stage_a: TrainConfig,
    pub stage_b: TrainConfig,
    pub stage_c: TrainConfig,
    pub baseline: TrainConfig,
    pub probe: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            stage_a: TrainConfig { steps: 3000, ..base.clone() },
            stage_b: TrainConfig { steps: 5000, ..base.clone() },
            stage_c: TrainConfig { steps: 5000, ..base.clone() },
            baseline: TrainConfig { steps: 5000, ..base.clone() },
            probe: TrainConfig { steps: 2000, ..base },
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSectionPatch {
    stage_a: Option<serde_json::Map<String, serde_json::Value>>,
    stage_b: Option<serde_json::Map<String, serde_json::Value>>,
    stage_c: Option<serde_json::Map<String, serde_json::Value>>,
    baseline: Option<serde_json::Map<String, serde_json::Value>>,
    probe: Option<serde_json::Map<String, serde_json::Value>>,
}

impl<'de> Deserialize<'de> for TrainSection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let patch = TrainSectionPatch::deserialize(d)?;
        let mut out = TrainSection::default();
        let entries = [
            (Stage::StageA, patch.stage_a),
            (Stage::StageB, patch.stage_b),
            (Stage::StageC, patch.stage_c),
            (Stage::Baseline, patch.baseline),
            (Stage::Probe, patch.probe),
        ];
        for (stage, entry) in entries {
            let Some(entry) = entry else { continue };
            let slot = out.for_stage_mut(stage);
            let mut base = serde_json::to_value(&*slot).map_err(serde::de::Error::custom)?;
            let map = base.as_object_mut().expect("struct serializes to an object");
            for (k, v) in entry {
                map.insert(k, v);
            }
            *slot = serde_json::from_value(base).map_err(serde::de::Error::custom)?;
        }
        Ok(out)
    }
}

impl TrainSection {
    pub fn for_stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::StageA => &self.stage_a,
            Stage::StageB => &self.stage_b,
            Stage::StageC => &self.stage_c,
            Stage::Baseline => &self.baseline,
            Stage::Probe => &self.probe,
        }
    }

    pub fn for_stage_mut(&mut self, stage: Stage) -> &mut TrainConfig {
        match stage {
            Stage::StageA => &mut self.stage_a,
            Stage::StageB => &mut self.stage_b,
            Stage::StageC => &mut self.stage_c,
            Stage::Baseline => &mut self.baseline,
            Stage::Probe => &mut self.probe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub extractor: ExtractorConfig,
    /// Images per set in FID and IS evaluations of generated samples.
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { extractor: ExtractorConfig::default(), samples: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: u32,
    pub shapes: ShapesSection,
    pub schedule: ScheduleSection,
    pub stage_a: StageAConfig,
    pub compressor: CompressorConfig,
    pub text: TextConfig,
    pub stage_b: StageBConfig,
    pub stage_c: StageCConfig,
    pub baseline: StageBConfig,
    pub probe: ProbeDecoderConfig,
    pub sampler: SamplerConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        let sys = SystemConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            shapes: ShapesSection { image_size: sys.image_size },
            schedule: ScheduleSection { offset: sys.schedule_offset },
            stage_a: sys.stage_a,
            compressor: sys.compressor,
            text: sys.text,
            stage_b: sys.stage_b,
            stage_c: sys.stage_c,
            baseline: sys.baseline,
            probe: sys.probe,
            sampler: SamplerConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.system().validate()?;
        self.sampler.validate()?;
        for stage in Stage::ALL {
            self.train.for_stage(stage).validate()?;
        }
        Ok(())
    }

    pub fn system(&self) -> SystemConfig {
        SystemConfig {
            image_size: self.shapes.image_size,
            schedule_offset: self.schedule.offset,
            stage_a: self.stage_a.clone(),
            compressor: self.compressor.clone(),
            text: self.text.clone(),
            stage_b: self.stage_b.clone(),
            stage_c: self.stage_c.clone(),
            baseline: self.baseline.clone(),
            probe: self.probe.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
