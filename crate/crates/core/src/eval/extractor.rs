//! Desk-scale stand-in for an Inception feature extractor: a small conv
//! classifier trained once, from a fixed seed, on a held-out synthetic corpus
//! and cached on disk. Features are the pooled penultimate activations.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wurstkit_tensor::nn::{ChannelNorm, Conv2d, Init, Linear};
use wurstkit_tensor::optim::{AdamW, AdamWConfig};
use wurstkit_tensor::{ParamStore, Session, Tensor, Var};

use super::manipulate::resize_area;
use super::FeatureStats;
use crate::training::checkpoint::Checkpoint;
use crate::training::dataset::{synth_dataset, ImageCache, SynthSpec};
use crate::{Error, Result};

/// Bumped whenever the architecture or training recipe changes.
pub const EXTRACTOR_VERSION: &str = "shape-classifier-v2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub input_size: usize,
    pub widths: [usize; 4],
    pub classes: usize,
    pub train_images: usize,
    /// Corpus seed of the held-out training set; distinct from evaluation corpora.
    pub data_seed: u64,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Photometric jitter amplitude (fraction) applied during training.
    pub jitter: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            input_size: 48,
            widths: [16, 32, 64, 32],
            classes: 12,
            train_images: 2000,
            data_seed: 0xE7A1_0001,
            seed: 7,
            steps: 2000,
            batch_size: 32,
            lr: 2e-3,
            jitter: 0.3,
        }
    }
}

impl ExtractorConfig {
    pub fn features(&self) -> usize {
        self.widths[3]
    }

    /// Content hash used in the cache file name.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(format!("{EXTRACTOR_VERSION}{json}").as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn version(&self) -> String {
        format!("{EXTRACTOR_VERSION}-{}", self.fingerprint())
    }
}

pub struct FeatureExtractor {
    pub cfg: ExtractorConfig,
    store: ParamStore<f32>,
    convs: Vec<Conv2d>,
    norms: Vec<ChannelNorm>,
    classifier: Linear,
}

impl FeatureExtractor {
    fn build(cfg: ExtractorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store.scope(&format!("fx.conv{i}")), cin, w, 3, 2, 1, Init::Default, &mut rng));
            norms.push(ChannelNorm::new(&mut store.scope(&format!("fx.norm{i}")), w, true));
            cin = w;
        }
        let classifier = Linear::new(&mut store.scope("fx.cls"), cin, cfg.classes, true, Init::Default, &mut rng);
        Self { cfg, store, convs, norms, classifier }
    }

    /// Resizes (area filter) to the input size and maps `[0, 1]` to `[-2, 2]`.
    pub fn prepare(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = images.dim(0);
        let s = self.cfg.input_size;
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let img = images.index0(i);
            let img = if img.dim(1) == s && img.dim(2) == s { img } else { resize_area(&img, s, s)? };
            parts.push(img.map(|v| (v - 0.5) * 4.0));
        }
        Ok(Tensor::stack(&parts)?)
    }

    fn forward(&self, s: &Session<'_, f32>, x: &Var<f32>) -> Result<(Var<f32>, Var<f32>)> {
        let mut h = x.clone();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            h = n.forward(s, &c.forward(s, &h)?)?.gelu();
        }
        let (n, c) = (h.shape()[0], h.shape()[1]);
        let feats = h.mean_dims(&[2, 3])?.reshape([n, c])?;
        let logits = self.classifier.forward(s, &feats)?;
        Ok((feats, logits))
    }

    /// Trains from scratch; fully determined by the config.
    pub fn train(cfg: ExtractorConfig) -> Result<Self> {
        let mut fx = Self::build(cfg.clone());
        let spec = SynthSpec { count: cfg.train_images, ..Default::default() };
        if spec.num_classes() != cfg.classes {
            return Err(Error::Config(format!("extractor has {} classes, corpus {}", cfg.classes, spec.num_classes())));
        }
        let manifest = synth_dataset(&spec, cfg.data_seed)?;
        let cache = ImageCache::<f32>::build(&manifest)?;
        let labels: Vec<usize> = manifest.records.iter().map(|r| r.class.expect("synthetic records are labelled")).collect();
        let inputs = fx.prepare(&cache.images)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
        let mut opt = AdamW::new(AdamWConfig::default());
        for step in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..labels.len())).collect();
            let mut parts = Vec::with_capacity(idx.len());
            for &i in &idx {
                let b = 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter) as f32;
                let c = 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter) as f32;
                // jitter in [0, 1] space, then back to the network range
                parts.push(inputs.index0(i).map(|v| {
                    let x = ((v / 4.0 + 0.5) * b - 0.5) * c + 0.5;
                    (x.clamp(0.0, 1.0) - 0.5) * 4.0
                }));
            }
            let batch = Tensor::stack(&parts)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let grads = {
                let s = Session::train(&fx.store);
                let (_, logits) = fx.forward(&s, &Var::constant(batch))?;
                let loss = logits.cross_entropy(&y)?;
                loss.backward();
                s.grads()
            };
            let lr = wurstkit_tensor::optim::warmup_lr(cfg.lr, 50, step);
            opt.step(&mut fx.store, &grads, lr);
        }
        Ok(fx)
    }

    /// Loads the cached extractor for `cfg` from `dir`, training and caching
    /// it first if absent.
    pub fn load_or_train(cfg: ExtractorConfig, dir: &Path) -> Result<Self> {
        let path = dir.join(format!("{}.ckpt", cfg.version()));
        if path.exists() {
            match Checkpoint::load(&path).and_then(|ck| Self::from_checkpoint(cfg.clone(), &ck)) {
                Ok(fx) => return Ok(fx),
                Err(e) => log::warn!("ignoring unusable extractor cache {}: {e}", path.display()),
            }
        }
        let fx = Self::train(cfg)?;
        std::fs::create_dir_all(dir)?;
        fx.to_checkpoint()?.save(&path)?;
        Ok(fx)
    }

    /// The pinned default extractor from the default cache directory.
    pub fn pinned() -> Result<Self> {
        Self::load_or_train(ExtractorConfig::default(), &cache_dir())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("extractor", self.cfg.steps, serde_json::to_value(&self.cfg)?);
        ck.provenance = Some(serde_json::json!({ "version": self.cfg.version() }));
        for (name, t, _) in self.store.named() {
            ck.insert(name, t.clone())?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(cfg: ExtractorConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.stage != "extractor" || ck.config != serde_json::to_value(&cfg)? {
            return Err(Error::Checkpoint("checkpoint does not hold this extractor configuration".into()));
        }
        let mut fx = Self::build(cfg);
        let ids: Vec<_> = fx.store.ids().collect();
        for id in ids {
            let name = fx.store.name(id).to_string();
            fx.store.set(id, ck.get(&name)?.clone())?;
        }
        Ok(fx)
    }

    pub fn version(&self) -> String {
        self.cfg.version()
    }

    /// Features `[N, d_f]` and class probabilities `[N, K]` for `[N, 3, H, W]` images.
    pub fn run(&self, images: &Tensor<f32>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if images.rank() != 4 || images.dim(1) != 3 {
            return Err(Error::Shape(format!("extractor expects [N, 3, H, W], got {:?}", images.shape())));
        }
        let s = Session::eval(&self.store);
        let mut feats = Vec::new();
        let mut probs = Vec::new();
        let n = images.dim(0);
        for start in (0..n).step_by(64) {
            let len = 64.min(n - start);
            let x = self.prepare(&images.narrow(0, start, len)?)?;
            let (f, logits) = self.forward(&s, &Var::constant(x))?;
            let p = logits.softmax()?;
            let (d, k) = (f.shape()[1], p.shape()[1]);
            feats.extend(f.value().data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
            probs.extend(p.value().data().chunks(k).map(|r| {
                let v: Vec<f64> = r.iter().map(|&v| v as f64).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            }));
        }
        Ok((feats, probs))
    }

    pub fn stats(&self, images: &Tensor<f32>) -> Result<FeatureStats> {
        let (feats, _) = self.run(images)?;
        if feats.len() < self.cfg.features() {
            log::warn!("{} samples for {}-dim features: covariance is rank deficient", feats.len(), self.cfg.features());
        }
        FeatureStats::from_rows(&feats, self.cfg.features())
    }

    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let (_, probs) = self.run(images)?;
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|(p, &l)| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|m| m.0) == Some(l))
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// `$WURSTKIT_CACHE`, or `wurstkit-cache` in the system temp directory.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("WURSTKIT_CACHE").map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("wurstkit-cache"))
}
