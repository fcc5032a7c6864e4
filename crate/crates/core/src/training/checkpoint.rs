//! Checkpoint container: `MAGIC`, a little-endian u64 manifest length, the
//! manifest as JSON, then every tensor as little-endian f32 in manifest order.
//! The manifest carries a SHA-256 of the tensor section.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wurstkit_tensor::Tensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"WKCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset inside the tensor section.
    pub offset: u64,
    pub bytes: u64,
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| Error::Checkpoint(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub provenance: Option<serde_json::Value>,
    pub tensor_sha256: String,
    pub tensors: Vec<TensorRecord>,
}

/// Named f32 tensors (sorted by name, so names are unique) plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub provenance: Option<serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, step: u64, config: serde_json::Value) -> Self {
        Self { stage: stage.into(), step, config, rng: None, provenance: None, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().filter(|(n, _)| !n.starts_with("optim.")).map(|(_, t)| t.numel()).sum()
    }

    fn tensor_section(&self) -> (Vec<u8>, Vec<TensorRecord>) {
        let mut bytes = Vec::new();
        let mut records = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = bytes.len() as u64;
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            records.push(TensorRecord {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                bytes: bytes.len() as u64 - offset,
            });
        }
        (bytes, records)
    }

    fn parts(&self) -> (Manifest, Vec<u8>) {
        let (section, records) = self.tensor_section();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage.clone(),
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
            provenance: self.provenance.clone(),
            tensor_sha256: hex::encode(Sha256::digest(&section)),
            tensors: records,
        };
        (manifest, section)
    }

    pub fn manifest(&self) -> Manifest {
        self.parts().0
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (manifest, section) = self.parts();
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + section.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&section);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        let section = &body[mlen..];
        if hex::encode(Sha256::digest(section)) != manifest.tensor_sha256 {
            return Err(bad("tensor section hash mismatch"));
        }
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for r in &manifest.tensors {
            if r.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", r.name, r.dtype)));
            }
            let numel: usize = r.shape.iter().product();
            if r.bytes != numel as u64 * 4 || r.offset != expected_offset {
                return Err(Error::Checkpoint(format!("{}: inconsistent byte layout", r.name)));
            }
            let end = (r.offset + r.bytes) as usize;
            if end > section.len() {
                return Err(Error::Checkpoint(format!("{}: truncated tensor data", r.name)));
            }
            let data: Vec<f32> = section[r.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(r.name.clone(), Tensor::new(r.shape.clone(), data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor name {}", r.name)));
            }
            expected_offset += r.bytes;
        }
        if expected_offset as usize != section.len() {
            return Err(bad("trailing bytes after tensor section"));
        }
        Ok(Self {
            stage: manifest.stage,
            step: manifest.step,
            config: manifest.config,
            rng: manifest.rng,
            provenance: manifest.provenance,
            tensors,
        })
    }

    /// Written atomically: a temporary sibling file renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// Per-tensor `(1-λ)·a + λ·b` over model tensors (optimizer state is
/// dropped). `λ = 0` and `λ = 1` return the inputs bit for bit.
pub fn interpolate_weights(a: &Checkpoint, b: &Checkpoint, lambda: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("interpolation weight {lambda} outside [0, 1]")));
    }
    if a.stage != b.stage {
        return Err(Error::Checkpoint(format!("cannot merge stage {} with stage {}", a.stage, b.stage)));
    }
    let model = |c: &Checkpoint| -> Vec<String> { c.tensors.keys().filter(|n| !n.starts_with("optim.")).cloned().collect() };
    let (na, nb) = (model(a), model(b));
    if na != nb {
        let only_a: Vec<_> = na.iter().filter(|n| !nb.contains(n)).collect();
        let only_b: Vec<_> = nb.iter().filter(|n| !na.contains(n)).collect();
        return Err(Error::Checkpoint(format!("tensor names differ: only in a {only_a:?}, only in b {only_b:?}")));
    }
    let mut out = Checkpoint::new(a.stage.clone(), 0, a.config.clone());
    for name in na {
        let (ta, tb) = (&a.tensors[&name], &b.tensors[&name]);
        if ta.shape() != tb.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let t = if lambda == 0.0 {
            ta.clone()
        } else if lambda == 1.0 {
            tb.clone()
        } else {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| ((1.0 - lambda) * x as f64 + lambda * y as f64) as f32)
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        out.insert(name, t)?;
    }
    out.provenance = Some(serde_json::json!({
        "merge": { "a": a.sha256()?, "b": b.sha256()?, "lambda": lambda, "a_step": a.step, "b_step": b.step }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("stage-c", 12, serde_json::json!({"width": 8}));
        c.insert("c.w", Tensor::new([2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE])).unwrap();
        c.insert("c.b", Tensor::new([3], vec![0.0, -0.0, 7.0])).unwrap();
        c.rng = Some(RngState::capture(&ChaCha8Rng::seed_from_u64(9)));
        c
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"WKCKPT01").is_err());
        let mut c = sample();
        assert!(c.insert("c.w", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..37 {
            rng.next_u32();
        }
        let mut resumed = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn interpolation_cases() {
        let mut a = Checkpoint::new("stage-c", 1, serde_json::Value::Null);
        a.insert("w", Tensor::new([1], vec![2.0])).unwrap();
        a.insert("z", Tensor::new([1], vec![-0.0])).unwrap();
        a.insert("optim.m.w", Tensor::new([1], vec![9.0])).unwrap();
        let mut b = Checkpoint::new("stage-c", 2, serde_json::Value::Null);
        b.insert("w", Tensor::new([1], vec![4.0])).unwrap();
        b.insert("z", Tensor::new([1], vec![1.0])).unwrap();
        let mid = interpolate_weights(&a, &b, 0.5).unwrap();
        assert_eq!(mid.get("w").unwrap().data(), &[3.0]);
        assert!(!mid.tensors.contains_key("optim.m.w"));
        let zero = interpolate_weights(&a, &b, 0.0).unwrap();
        assert_eq!(zero.get("z").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
        assert_eq!(interpolate_weights(&a, &b, 1.0).unwrap().get("w").unwrap().data(), &[4.0]);
        let mut c = b.clone();
        c.tensors.insert("w".into(), Tensor::new([2], vec![0.0, 0.0]));
        assert!(interpolate_weights(&a, &c, 0.5).is_err());
        assert!(interpolate_weights(&a, &b, 1.5).is_err());
    }
}
