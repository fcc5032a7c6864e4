//! Text conditioning: a hashed-vocabulary tokenizer and a trainable embedder
//! producing unpooled `[L_max, d]` sequences, plus a learned null label.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wurstkit_tensor::nn::{Embedding, LayerNorm};
use wurstkit_tensor::{ParamId, ParamStore, Scalar, Session, Tensor, Var};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
    /// Probability of replacing a caption by the null label during training.
    pub dropout: f64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { vocab_size: 4096, dim: 64, max_len: 8, dropout: 0.05 }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.max_len == 0 {
            return Err(Error::Config("text vocab_size, dim and max_len must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config("text dropout must be in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on whitespace and hashes each token into the
/// vocabulary. Positions past the caption are `None` (padding); longer
/// captions are truncated.
pub fn tokenize(caption: &str, vocab_size: usize, max_len: usize) -> Vec<Option<usize>> {
    let mut out: Vec<Option<usize>> = caption
        .to_lowercase()
        .split_whitespace()
        .take(max_len)
        .map(|t| Some((fnv1a(t.as_bytes()) % vocab_size as u64) as usize))
        .collect();
    out.resize(max_len, None);
    out
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    tokens: Embedding,
    pad: ParamId,
    position: ParamId,
    pub null: ParamId,
    norm: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: TextConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut sc = store.scope(prefix);
        let tokens = Embedding::new(&mut sc.sub("tokens"), cfg.vocab_size, cfg.dim, rng);
        let pad = sc.param("pad", Tensor::randn([1, cfg.dim], rng));
        let position = sc.param("position", Tensor::<T>::randn([cfg.max_len, cfg.dim], rng).scale(T::c(0.5)));
        let null = sc.param("null", Tensor::randn([cfg.max_len, cfg.dim], rng));
        let norm = LayerNorm::new(&mut sc.sub("norm"), cfg.dim, true);
        Ok(Self { cfg, tokens, pad, position, null, norm })
    }

    /// `[N, L_max, d]` embeddings; rows with `use_null[n]` are the null label.
    pub fn encode<T: Scalar, S: AsRef<str>>(
        &self,
        s: &Session<'_, T>,
        captions: &[S],
        use_null: &[bool],
    ) -> Result<Var<T>> {
        if captions.len() != use_null.len() {
            return Err(Error::Shape(format!("{} captions, {} null flags", captions.len(), use_null.len())));
        }
        let (n, l, d, v) = (captions.len(), self.cfg.max_len, self.cfg.dim, self.cfg.vocab_size);
        let idx: Vec<usize> = captions
            .iter()
            .flat_map(|c| tokenize(c.as_ref(), v, l))
            .map(|t| t.unwrap_or(v))
            .collect();
        let table = Var::concat(&[&s.param(self.tokens.table), &s.param(self.pad)], 0)?;
        let emb = table.gather_rows(&idx, &[n, l])?;
        let emb = self.norm.forward(s, &emb.add(&s.param(self.position))?)?;
        let null = s.param(self.null).reshape([1, l, d])?;
        crate::blocks::select_null(&emb, &null, use_null)
    }

    pub fn encode_tensor<T: Scalar, S: AsRef<str>>(&self, store: &ParamStore<T>, captions: &[S]) -> Result<Tensor<T>> {
        let s = Session::eval(store);
        Ok(self.encode(&s, captions, &vec![false; captions.len()])?.value().clone())
    }

    /// The null label broadcast to a batch, `[N, L_max, d]`.
    pub fn null_batch<T: Scalar>(&self, store: &ParamStore<T>, n: usize) -> Tensor<T> {
        let one = store.get(self.null).reshape([1, self.cfg.max_len, self.cfg.dim]).expect("null shape");
        Tensor::concat(&vec![&one; n], 0).expect("same shapes")
    }
}

/// Bernoulli draw: true means the caption is replaced by the null label.
pub fn maybe_null<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain(format!("null rate {rate} outside [0, 1]")));
    }
    Ok(rng.gen::<f64>() < rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc() -> (TextEncoder, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = ParamStore::new();
        let e = TextEncoder::new(TextConfig::default(), &mut st, "text", &mut rng).unwrap();
        (e, st)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn tokenizer_pads_truncates_and_lowercases() {
        assert_eq!(tokenize("", 4096, 3), vec![None, None, None]);
        assert_eq!(tokenize("Red  CIRCLE", 4096, 3), tokenize("red circle", 4096, 3));
        assert_eq!(tokenize("a b c d e", 4096, 2).len(), 2);
    }

    #[test]
    fn empty_caption_is_padding_rows() {
        let (e, st) = enc();
        let out = e.encode_tensor(&st, &[""]).unwrap();
        assert_eq!(out.shape(), &[1, 8, 64]);
        let row = |i: usize| out.data()[i * 64..(i + 1) * 64].to_vec();
        // padding rows differ only through the position embedding
        assert_ne!(row(0), row(1));
        assert!(out.all_finite());
    }

    #[test]
    fn deterministic_and_null_substitution() {
        let (e, st) = enc();
        let a = e.encode_tensor(&st, &["red circle", "red circle"]).unwrap();
        assert_eq!(a.index0(0), a.index0(1));
        let s = Session::eval(&st);
        let out = e.encode(&s, &["red circle", "blue square"], &[false, true]).unwrap();
        assert_eq!(out.value().index0(1), st.get(e.null).clone());
        assert_eq!(out.value().index0(0), a.index0(0));
    }

    #[test]
    fn null_rate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| !maybe_null(&mut rng, 0.0).unwrap()));
        assert!((0..100).all(|_| maybe_null(&mut rng, 1.0).unwrap()));
        assert!(maybe_null(&mut rng, -0.1).is_err());
    }
}
