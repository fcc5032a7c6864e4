//! FID robustness audit over image manipulations and the sampling latency
//! benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use wurstkit_tensor::Tensor;

use super::extractor::FeatureExtractor;
use super::manipulate::{manipulate, Manipulation};
use super::{fid, FidRow};
use crate::pipeline::{sample_stage_b, sample_stage_c, PassCounter, Refiner, SamplerConfig};
use crate::system::System;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: Vec<FidRow>,
}

impl AuditReport {
    pub fn fid_of(&self, spec: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.spec == spec).map(|r| r.fid)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("spec,fid,n,extractor_version\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.spec, r.fid, r.n, r.extractor_version));
        }
        out
    }
}

/// FID between the stats of `images` and of each manipulated copy.
pub fn fid_audit(images: &Tensor<f32>, specs: &[Manipulation], fx: &FeatureExtractor) -> Result<AuditReport> {
    if images.rank() != 4 || images.dim(0) == 0 {
        return Err(Error::Domain("fid audit needs a non-empty [N, 3, H, W] image set".into()));
    }
    let n = images.dim(0);
    let reference = fx.stats(images)?;
    let mut rows = Vec::with_capacity(specs.len());
    for &m in specs {
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            parts.push(manipulate(&images.index0(i), m, fx.cfg.input_size)?);
        }
        let stats = fx.stats(&Tensor::stack(&parts)?)?;
        rows.push(FidRow { spec: m.to_string(), fid: fid(&reference, &stats)?, n, extractor_version: fx.version() });
    }
    Ok(AuditReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub batch_size: usize,
    pub stage_c_passes: usize,
    pub stage_b_passes: usize,
    pub total_passes: usize,
    pub stage_c_seconds: f64,
    pub stage_b_seconds: f64,
    pub decode_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config: SamplerConfig,
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "batch_size,stage_c_passes,stage_b_passes,total_passes,stage_c_seconds,stage_b_seconds,decode_seconds,total_seconds\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.batch_size,
                r.stage_c_passes,
                r.stage_b_passes,
                r.total_passes,
                r.stage_c_seconds,
                r.stage_b_seconds,
                r.decode_seconds,
                r.total_seconds
            ));
        }
        out
    }
}

/// Times one full generation per batch size, stage by stage.
pub fn latency_bench(sys: &System, cfg: &SamplerConfig, batch_sizes: &[usize]) -> Result<LatencyReport> {
    let mut rows = Vec::new();
    for &bs in batch_sizes {
        if bs == 0 {
            return Err(Error::Domain("batch size must be >= 1".into()));
        }
        let prompts = vec!["red circle"; bs];
        let counter = PassCounter::default();
        let start = Instant::now();
        let semantic = sample_stage_c(sys, &prompts, cfg, &counter)?;
        let t_c = start.elapsed().as_secs_f64();
        let latents = sample_stage_b(sys, Refiner::StageB, Some(&semantic), &prompts, cfg, &counter)?;
        let t_b = start.elapsed().as_secs_f64() - t_c;
        sys.a.decode_latents(&sys.store, &latents)?;
        let total = start.elapsed().as_secs_f64();
        rows.push(LatencyRow {
            batch_size: bs,
            stage_c_passes: counter.stage_c(),
            stage_b_passes: counter.stage_b(),
            total_passes: counter.total(),
            stage_c_seconds: t_c,
            stage_b_seconds: t_b,
            decode_seconds: total - t_c - t_b,
            total_seconds: total,
        });
    }
    Ok(LatencyReport { config: cfg.clone(), rows })
}
