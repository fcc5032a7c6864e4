//! Stage A: an f4 VQGAN. Encoder and decoder each have two ConvNeXt stages
//! separated by a 4x4 stride-2 (transposed) convolution, with a factor-2
//! pixel (un)shuffle at the image boundary and a BatchNorm on the latent.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use wurstkit_tensor::nn::{BatchNorm2d, ChannelNorm, Conv2d, ConvTranspose2d, Init};
use wurstkit_tensor::{ParamId, ParamStore, Scalar, Session, Tensor, Var};

use crate::blocks::ConvNextBlock;
use crate::{Error, Result};

/// Spatial compression factor of Stage A.
pub const FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageAConfig {
    /// Channels of the full-resolution stage; the latent-side stage uses twice as many.
    pub width: usize,
    pub encoder_blocks: [usize; 2],
    /// Latent-side stage first.
    pub decoder_blocks: [usize; 2],
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub commitment: f64,
    pub quantization_drop: f64,
    pub mse_weight: f64,
    pub adversarial_weight: f64,
    pub perceptual_weight: f64,
    pub adversarial_start: u64,
    pub revive_every: u64,
    pub discriminator_width: usize,
    /// Seed of the fixed random perceptual feature extractor.
    pub perceptual_seed: u64,
}

impl Default for StageAConfig {
    fn default() -> Self {
        Self {
            width: 32,
            encoder_blocks: [1, 1],
            decoder_blocks: [2, 1],
            latent_channels: 4,
            codebook_size: 64,
            commitment: 0.25,
            quantization_drop: 0.1,
            mse_weight: 1.0,
            adversarial_weight: 0.01,
            perceptual_weight: 0.1,
            adversarial_start: 10_000,
            revive_every: 1_000,
            discriminator_width: 32,
            perceptual_seed: 0x5EED_0A11,
        }
    }
}

impl StageAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.latent_channels == 0 {
            return Err(Error::Config("stage_a widths must be >= 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("stage_a codebook needs at least 2 entries".into()));
        }
        if !(0.0..=1.0).contains(&self.quantization_drop) {
            return Err(Error::Config("stage_a quantization_drop must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Weight of the adversarial term at a training step.
    pub fn adversarial_weight_at(&self, step: u64) -> f64 {
        if step < self.adversarial_start {
            0.0
        } else {
            self.adversarial_weight
        }
    }
}

/// Patch discriminator producing one logit per receptive field.
#[derive(Debug, Clone)]
pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    norm: ChannelNorm,
    out: Conv2d,
}

impl Discriminator {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, width: usize, rng: &mut R) -> Self {
        let mut sc = store.scope("disc");
        Self {
            c1: Conv2d::new(&mut sc.sub("c1"), 3, width, 4, 2, 1, Init::Default, rng),
            c2: Conv2d::new(&mut sc.sub("c2"), width, 2 * width, 4, 2, 1, Init::Default, rng),
            norm: ChannelNorm::new(&mut sc.sub("norm"), 2 * width, true),
            out: Conv2d::new(&mut sc.sub("out"), 2 * width, 1, 3, 1, 1, Init::Default, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, img: &Var<T>) -> Result<Var<T>> {
        let x = img.scale(2.0).add_scalar(-1.0);
        let x = self.c1.forward(s, &x)?.leaky_relu(0.2);
        let x = self.norm.forward(s, &self.c2.forward(s, &x)?)?.leaky_relu(0.2);
        Ok(self.out.forward(s, &x)?)
    }
}

/// Fixed, randomly initialized four-layer conv feature extractor. Its weights
/// are buffers derived from a documented seed and are never trained.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    layers: Vec<Conv2d>,
}

impl PerceptualNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let plan = [(3, 8, 1), (8, 16, 2), (16, 32, 2), (32, 32, 2)];
        let mut layers = Vec::new();
        for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = Tensor::<T>::randn([cout, cin, 3, 3], &mut rng).scale(T::c(std));
            let mut sc = store.scope("percep");
            let mut sc = sc.sub(&format!("l{i}"));
            let weight = sc.buffer("weight", w);
            let bias = sc.buffer("bias", Tensor::zeros([cout]));
            layers.push(Conv2d {
                weight,
                bias: Some(bias),
                spec: wurstkit_tensor::Conv2dSpec { stride, padding: 1 },
                in_channels: cin,
                out_channels: cout,
                kernel: 3,
            });
        }
        Self { layers }
    }

    pub fn features<T: Scalar>(&self, s: &Session<'_, T>, img: &Var<T>) -> Result<Vec<Var<T>>> {
        let mut x = img.scale(2.0).add_scalar(-1.0);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            x = l.forward(s, &x)?.relu();
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Sum over layers of the mean squared feature difference.
    pub fn distance<T: Scalar>(&self, s: &Session<'_, T>, recon: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        let fr = self.features(s, recon)?;
        let ft = self.features(s, &target.detach())?;
        let mut total: Option<Var<T>> = None;
        for (a, b) in fr.iter().zip(&ft) {
            let d = a.sub(&b.detach())?.square().mean();
            total = Some(match total {
                None => d,
                Some(t) => t.add(&d)?,
            });
        }
        Ok(total.expect("perceptual net has layers"))
    }
}

#[derive(Debug, Clone)]
pub struct StageA {
    pub cfg: StageAConfig,
    enc_in: Conv2d,
    enc_s1: Vec<ConvNextBlock>,
    enc_down: Conv2d,
    enc_s2: Vec<ConvNextBlock>,
    enc_out: Conv2d,
    enc_bn: BatchNorm2d,
    dec_in: Conv2d,
    dec_s1: Vec<ConvNextBlock>,
    dec_up: ConvTranspose2d,
    dec_norm: ChannelNorm,
    dec_s2: Vec<ConvNextBlock>,
    dec_out: Conv2d,
    pub codebook: ParamId,
    pub discriminator: Discriminator,
    pub perceptual: PerceptualNet,
}

/// Per-term Stage A loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageALossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Result of a differentiable Stage A training forward pass.
pub struct StageATrainOutput<T: Scalar> {
    pub loss: Var<T>,
    pub breakdown: StageALossBreakdown,
    pub reconstruction: Var<T>,
    pub latent: Tensor<T>,
    pub indices: Option<Vec<usize>>,
}

impl StageA {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: StageAConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c1, c2, z) = (cfg.width, cfg.width * 2, cfg.latent_channels);
        let blocks = |store: &mut ParamStore<T>, prefix: &str, n: usize, c: usize, rng: &mut R| -> Vec<ConvNextBlock> {
            (0..n).map(|i| ConvNextBlock::new(&mut store.scope(&format!("{prefix}.{i}")), c, 0, None, rng)).collect()
        };
        let enc_in = Conv2d::new(&mut store.scope("enc.in"), 12, c1, 1, 1, 0, Init::Default, rng);
        let enc_s1 = blocks(store, "enc.s1", cfg.encoder_blocks[0], c1, rng);
        let enc_down = Conv2d::new(&mut store.scope("enc.down"), c1, c2, 4, 2, 1, Init::Default, rng);
        let enc_s2 = blocks(store, "enc.s2", cfg.encoder_blocks[1], c2, rng);
        let enc_out = Conv2d::new(&mut store.scope("enc.out"), c2, z, 1, 1, 0, Init::Default, rng);
        let enc_bn = BatchNorm2d::new(&mut store.scope("enc.bn"), z);
        let dec_in = Conv2d::new(&mut store.scope("dec.in"), z, c2, 1, 1, 0, Init::Default, rng);
        let dec_s1 = blocks(store, "dec.s1", cfg.decoder_blocks[0], c2, rng);
        let dec_up = ConvTranspose2d::new(&mut store.scope("dec.up"), c2, c1, 4, 2, 1, rng);
        let dec_norm = ChannelNorm::new(&mut store.scope("dec.norm"), c1, true);
        let dec_s2 = blocks(store, "dec.s2", cfg.decoder_blocks[1], c1, rng);
        let dec_out = Conv2d::new(&mut store.scope("dec.out"), c1, 12, 1, 1, 0, Init::Default, rng);
        let k = cfg.codebook_size;
        let bound = 1.0 / k as f64;
        let codebook = store.scope("").param("codebook", Tensor::rand_uniform([k, z], -bound, bound, rng));
        let discriminator = Discriminator::new(store, cfg.discriminator_width, rng);
        let perceptual = PerceptualNet::new(store, cfg.perceptual_seed);
        Ok(Self {
            cfg,
            enc_in,
            enc_s1,
            enc_down,
            enc_s2,
            enc_out,
            enc_bn,
            dec_in,
            dec_s1,
            dec_up,
            dec_norm,
            dec_s2,
            dec_out,
            codebook,
            discriminator,
            perceptual,
        })
    }

    pub fn check_image_shape(shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected [N, 3, H, W] images, got {shape:?}")));
        }
        if !shape[2].is_multiple_of(FACTOR) || !shape[3].is_multiple_of(FACTOR) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!("image size {}x{} is not divisible by {FACTOR}", shape[2], shape[3])));
        }
        Ok(())
    }

    /// Unquantized latent `[N, z, H/4, W/4]` of images in `[0, 1]`.
    pub fn encode<T: Scalar>(&self, s: &Session<'_, T>, images: &Var<T>) -> Result<Var<T>> {
        Self::check_image_shape(images.shape())?;
        let x = images.scale(2.0).add_scalar(-1.0).pixel_unshuffle(2)?;
        let mut x = self.enc_in.forward(s, &x)?;
        for b in &self.enc_s1 {
            x = b.forward(s, &x, None, None)?;
        }
        x = self.enc_down.forward(s, &x)?;
        for b in &self.enc_s2 {
            x = b.forward(s, &x, None, None)?;
        }
        Ok(self.enc_bn.forward(s, &self.enc_out.forward(s, &x)?)?)
    }

    /// Decoder output in pixel units, not clipped.
    pub fn decode<T: Scalar>(&self, s: &Session<'_, T>, latent: &Var<T>) -> Result<Var<T>> {
        let shape = latent.shape();
        if shape.len() != 4 || shape[1] != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "expected [N, {}, h, w] latents, got {shape:?}",
                self.cfg.latent_channels
            )));
        }
        let mut x = self.dec_in.forward(s, latent)?;
        for b in &self.dec_s1 {
            x = b.forward(s, &x, None, None)?;
        }
        x = self.dec_norm.forward(s, &self.dec_up.forward(s, &x)?)?;
        for b in &self.dec_s2 {
            x = b.forward(s, &x, None, None)?;
        }
        let x = self.dec_out.forward(s, &x)?.pixel_shuffle(2)?;
        Ok(x.add_scalar(1.0).scale(0.5))
    }

    pub fn encode_images<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = Session::eval(store);
        Ok(self.encode(&s, &Var::constant(images.clone()))?.value().clone())
    }

    /// Decodes latents to images clipped to `[0, 1]`.
    pub fn decode_latents<T: Scalar>(&self, store: &ParamStore<T>, latents: &Tensor<T>) -> Result<Tensor<T>> {
        let s = Session::eval(store);
        let out = self.decode(&s, &Var::constant(latents.clone()))?;
        Ok(out.value().clamp(T::zero(), T::one()))
    }

    /// Quantized latent and token grid for unquantized latents.
    pub fn quantize<T: Scalar>(&self, store: &ParamStore<T>, latent: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        quantize(latent, store.get(self.codebook))
    }

    /// Training forward pass. `drop_quantization` skips the quantizer for
    /// this batch; otherwise gradients pass straight through it.
    pub fn train_forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        images: &Tensor<T>,
        step: u64,
        drop_quantization: bool,
    ) -> Result<StageATrainOutput<T>> {
        let x = Var::constant(images.clone());
        let z = self.encode(s, &x)?;
        let mut codebook_loss = None;
        let mut commit_loss = None;
        let mut indices = None;
        let zq = if drop_quantization {
            z.clone()
        } else {
            let (n, c, h, w) = z.value().dims4();
            let (idx, _) = quantize(z.value(), s.store().get(self.codebook))?;
            let q = s.param(self.codebook).gather_rows(&idx, &[n, h, w])?.permute(&[0, 3, 1, 2])?;
            debug_assert_eq!(q.shape(), &[n, c, h, w]);
            codebook_loss = Some(q.sub(&z.detach())?.square().mean());
            commit_loss = Some(z.sub(&q.detach())?.square().mean());
            indices = Some(idx);
            straight_through(&z, q.value())?
        };
        let recon = self.decode(s, &zq)?;
        let terms = self.reconstruction_terms(s, images, &recon, step)?;
        let mut loss = terms.0;
        let mut bd = terms.1;
        if let (Some(cb), Some(cm)) = (codebook_loss, commit_loss) {
            bd.codebook = cb.value().item().f64();
            bd.commitment = cm.value().item().f64();
            loss = loss.add(&cb)?.add(&cm.scale(self.cfg.commitment))?;
        }
        bd.total = loss.value().item().f64();
        Ok(StageATrainOutput { loss, breakdown: bd, reconstruction: recon, latent: z.value().clone(), indices })
    }

    /// `mse_w·MSE + w_AL(step)·AL + perc_w·PL`, with the generator hinge term
    /// `AL = -mean(D(x̂))`.
    pub fn reconstruction_terms<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        images: &Tensor<T>,
        recon: &Var<T>,
        step: u64,
    ) -> Result<(Var<T>, StageALossBreakdown)> {
        if images.shape() != recon.shape() {
            return Err(Error::Shape(format!("image {:?} vs reconstruction {:?}", images.shape(), recon.shape())));
        }
        let target = Var::constant(images.clone());
        let mse = recon.sub(&target)?.square().mean();
        let mut bd = StageALossBreakdown { mse: mse.value().item().f64(), ..Default::default() };
        let mut loss = mse.scale(self.cfg.mse_weight);
        if self.cfg.perceptual_weight != 0.0 {
            let pl = self.perceptual.distance(s, recon, &target)?;
            bd.perceptual = pl.value().item().f64();
            loss = loss.add(&pl.scale(self.cfg.perceptual_weight))?;
        }
        let w_al = self.cfg.adversarial_weight_at(step);
        if w_al != 0.0 {
            let al = self.discriminator.forward(s, recon)?.mean().neg();
            bd.adversarial = al.value().item().f64();
            loss = loss.add(&al.scale(w_al))?;
        }
        bd.total = loss.value().item().f64();
        Ok((loss, bd))
    }

    /// Hinge loss for the discriminator:
    /// `mean(relu(1 - D(x))) + mean(relu(1 + D(x̂)))`.
    pub fn discriminator_loss<T: Scalar>(&self, s: &Session<'_, T>, real: &Tensor<T>, fake: &Tensor<T>) -> Result<Var<T>> {
        let dr = self.discriminator.forward(s, &Var::constant(real.clone()))?;
        let df = self.discriminator.forward(s, &Var::constant(fake.clone()))?;
        let lr = dr.neg().add_scalar(1.0).relu().mean();
        let lf = df.add_scalar(1.0).relu().mean();
        Ok(lr.add(&lf)?)
    }

    /// Replaces codebook entries with zero usage by random latent vectors from
    /// `latents` (`[N, z, h, w]`). Returns the number of revived entries.
    pub fn revive_dead_codes<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        usage: &[u64],
        latents: &Tensor<T>,
        rng: &mut R,
    ) -> usize {
        let (n, z, h, w) = latents.dims4();
        let cells = n * h * w;
        let pick = Uniform::new(0, cells);
        let ld = latents.data().to_vec();
        let cb = store.value_mut(self.codebook).data_mut();
        let mut revived = 0;
        for (k, &u) in usage.iter().enumerate() {
            if u > 0 {
                continue;
            }
            let cell = pick.sample(rng);
            let (ni, rest) = (cell / (h * w), cell % (h * w));
            for c in 0..z {
                cb[k * z + c] = ld[((ni * z + c) * h * w) + rest];
            }
            revived += 1;
        }
        revived
    }
}

/// `z + (q - z)` with the difference held constant, so the gradient of the
/// output reaches `z` unchanged.
pub fn straight_through<T: Scalar>(z: &Var<T>, q: &Tensor<T>) -> Result<Var<T>> {
    Ok(z.add(&Var::constant(q.sub(z.value())))?)
}

/// Nearest codebook entry (Euclidean) for every cell of `[N, z, h, w]`
/// latents. Ties resolve to the lowest index.
pub fn quantize<T: Scalar>(latent: &Tensor<T>, codebook: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
    if latent.rank() != 4 || codebook.rank() != 2 || latent.dim(1) != codebook.dim(1) {
        return Err(Error::Shape(format!(
            "latent {:?} does not match codebook {:?}",
            latent.shape(),
            codebook.shape()
        )));
    }
    let (n, z, h, w) = latent.dims4();
    let k = codebook.dim(0);
    let plane = h * w;
    let (ld, cb) = (latent.data(), codebook.data());
    let mut idx = Vec::with_capacity(n * plane);
    let mut out = vec![T::zero(); latent.numel()];
    let mut cell = vec![T::zero(); z];
    for ni in 0..n {
        for p in 0..plane {
            for c in 0..z {
                cell[c] = ld[(ni * z + c) * plane + p];
            }
            let mut best = 0;
            let mut best_d = T::infinity();
            for e in 0..k {
                let d: T = (0..z).map(|c| (cell[c] - cb[e * z + c]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = e;
                }
            }
            idx.push(best);
            for c in 0..z {
                out[(ni * z + c) * plane + p] = cb[best * z + c];
            }
        }
    }
    Ok((idx, Tensor::new(latent.shape().to_vec(), out)))
}

/// Codebook vectors for a token grid, as a `[N, z, h, w]` latent.
pub fn lookup<T: Scalar>(codebook: &Tensor<T>, indices: &[usize], n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (k, z) = (codebook.dim(0), codebook.dim(1));
    if indices.len() != n * h * w {
        return Err(Error::Shape(format!("{} indices for a {n}x{h}x{w} grid", indices.len())));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
        return Err(Error::Domain(format!("token {bad} outside codebook of size {k}")));
    }
    let plane = h * w;
    let cb = codebook.data();
    let mut out = vec![T::zero(); n * z * plane];
    for (cell, &i) in indices.iter().enumerate() {
        let (ni, p) = (cell / plane, cell % plane);
        for c in 0..z {
            out[(ni * z + c) * plane + p] = cb[i * z + c];
        }
    }
    Ok(Tensor::new([n, z, h, w], out))
}

/// Bernoulli draw deciding whether a training batch skips quantization.
pub fn maybe_drop_quantization<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain(format!("drop rate {rate} outside [0, 1]")));
    }
    Ok(rng.gen::<f64>() < rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> StageAConfig {
        StageAConfig { width: 8, encoder_blocks: [1, 1], decoder_blocks: [1, 1], discriminator_width: 4, ..Default::default() }
    }

    #[test]
    fn encode_decode_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = ParamStore::<f32>::new();
        let a = StageA::new(tiny(), &mut st, &mut rng).unwrap();
        let x = Tensor::rand_uniform([2, 3, 16, 24], 0.0, 1.0, &mut rng);
        let z = a.encode_images(&st, &x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4, 6]);
        let y = a.decode_latents(&st, &z).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 24]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.encode_images(&st, &Tensor::zeros([1, 3, 15, 16])).is_err());
    }

    #[test]
    fn quantize_examples() {
        let cb = Tensor::<f64>::from_f64([2, 4], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let cell = Tensor::<f64>::from_f64([1, 4, 1, 1], &[0.2, 0.1, 0.0, 0.0]);
        assert_eq!(quantize(&cell, &cb).unwrap().0, vec![0]);
        let tie = Tensor::<f64>::from_f64([1, 4, 1, 1], &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(quantize(&tie, &cb).unwrap().0, vec![0]);
        let grid = vec![1, 0, 1, 1];
        let lat = lookup(&cb, &grid, 1, 2, 2).unwrap();
        assert_eq!(quantize(&lat, &cb).unwrap().0, grid);
        assert!(quantize(&Tensor::<f64>::zeros([1, 3, 1, 1]), &cb).is_err());
    }

    #[test]
    fn adversarial_schedule() {
        let c = StageAConfig::default();
        assert_eq!(c.adversarial_weight_at(9_999), 0.0);
        assert_eq!(c.adversarial_weight_at(10_000), 0.01);
    }

    #[test]
    fn loss_of_perfect_reconstruction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = ParamStore::<f64>::new();
        let a = StageA::new(tiny(), &mut st, &mut rng).unwrap();
        let s = Session::eval(&st);
        let x = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let (_, bd) = a.reconstruction_terms(&s, &x, &Var::constant(x.clone()), 5).unwrap();
        assert_eq!(bd.total, 0.0);
    }

    #[test]
    fn unit_residual_mse_only_loss_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = StageAConfig { perceptual_weight: 0.0, adversarial_weight: 0.0, ..tiny() };
        let mut st = ParamStore::<f64>::new();
        let a = StageA::new(cfg, &mut st, &mut rng).unwrap();
        let s = Session::eval(&st);
        let x = Tensor::rand_uniform([1, 3, 4, 4], 0.0, 1.0, &mut rng);
        let r = x.map(|v| v + 1.0);
        let (_, bd) = a.reconstruction_terms(&s, &x, &Var::constant(r), 20_000).unwrap();
        assert!((bd.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn drop_rate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| !maybe_drop_quantization(&mut rng, 0.0).unwrap()));
        assert!((0..1000).all(|_| maybe_drop_quantization(&mut rng, 1.0).unwrap()));
        assert!(maybe_drop_quantization(&mut rng, 1.5).is_err());
    }

    #[test]
    fn perceptual_weights_are_buffers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut st = ParamStore::<f32>::new();
        StageA::new(tiny(), &mut st, &mut rng).unwrap();
        let id = st.id("percep.l0.weight").unwrap();
        assert!(!st.is_trainable(id));
    }
}
