//! Cosine noise schedule, forward noising, the A/B noise reparametrization,
//! the DDPM update and classifier-free guidance.
//!
//! Scalar coefficients are computed in `f64`; tensors may be `f32` or `f64`.

use std::f64::consts::FRAC_PI_2;

use wurstkit_tensor::{Scalar, Tensor, Var};

use crate::{Error, Result};

/// Added to `|1 - B|` so the noise estimate never divides by zero.
pub const AB_EPS: f64 = 1e-5;

/// Lower end of the interval the sampler evaluates the model on.
pub const T_MIN: f64 = 1e-4;

/// Floor on ᾱ. The exact cosine form reaches ~4e-33 at `t = 1`, where the
/// first DDPM step would divide by √α ≈ 1e-16.
pub const ALPHA_BAR_MIN: f64 = 1e-6;

/// Image and latent geometry of one compression stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ShapeSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    pub factor: usize,
}

impl ShapeSpec {
    pub fn new(height: usize, width: usize, channels: usize, latent_channels: usize, factor: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || latent_channels == 0 || factor == 0 {
            return Err(Error::Domain("shape dimensions and factor must be >= 1".into()));
        }
        if !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
            return Err(Error::Domain(format!("{height}x{width} is not divisible by factor {factor}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            latent_height: height / factor,
            latent_width: width / factor,
            latent_channels,
            factor,
        })
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("timestep {t} outside [0, 1]")))
    }
}

/// Cosine schedule `ᾱ(t) = cos²(((t+s)/(1+s))·π/2) / cos²((s/(1+s))·π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub offset: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { offset: 0.008 }
    }
}

impl NoiseSchedule {
    pub fn cosine(offset: f64) -> Result<Self> {
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::Domain(format!("schedule offset {offset} must be positive")));
        }
        Ok(Self { offset })
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.alpha_bar_unchecked(t))
    }

    pub(crate) fn alpha_bar_unchecked(&self, t: f64) -> f64 {
        let s = self.offset;
        let f = |u: f64| (((u + s) / (1.0 + s)) * FRAC_PI_2).cos().powi(2);
        if t == 0.0 {
            return 1.0;
        }
        (f(t) / f(0.0)).clamp(ALPHA_BAR_MIN, 1.0)
    }

    /// `(1 - ᾱ) / (1 + ᾱ)`.
    pub fn p2_weight(&self, t: f64) -> Result<f64> {
        Ok(p2_from_alpha_bar(self.alpha_bar(t)?))
    }

    /// Sampling grid with `steps` model evaluations uniform over
    /// `[T_MIN, 1]`, anchored at `t_0 = 0`.
    pub fn grid(&self, steps: usize) -> Result<Discretization> {
        if steps == 0 {
            return Err(Error::Domain("sampling needs at least one step".into()));
        }
        let mut times = vec![0.0];
        if steps == 1 {
            times.push(1.0);
        } else {
            let dt = (1.0 - T_MIN) / (steps - 1) as f64;
            times.extend((0..steps).map(|i| if i + 1 == steps { 1.0 } else { T_MIN + dt * i as f64 }));
        }
        let alpha_bars: Vec<f64> = times.iter().map(|&t| self.alpha_bar_unchecked(t)).collect();
        Ok(Discretization { times, alpha_bars })
    }
}

pub fn p2_from_alpha_bar(alpha_bar: f64) -> f64 {
    (1.0 - alpha_bar) / (1.0 + alpha_bar)
}

/// Ordered grid `t_0 = 0 < t_1 < … < t_N = 1` with cached ᾱ values.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    times: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Discretization {
    /// Number of denoising steps `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bars[i]
    }

    /// `α_i = ᾱ(t_i) / ᾱ(t_{i-1})` for `i ≥ 1`.
    pub fn alpha(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.steps() {
            return Err(Error::Domain(format!("step index {i} outside 1..={}", self.steps())));
        }
        Ok(self.alpha_bars[i] / self.alpha_bars[i - 1])
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// `√ᾱ(t)·x0 + √(1-ᾱ(t))·ε`.
pub fn forward_noise<T: Scalar>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    t: f64,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape(x0, eps, "forward_noise")?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// [`forward_noise`] on a batch `[N, ...]` with one timestep per sample.
pub fn forward_noise_batch<T: Scalar>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    ts: &[f64],
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape(x0, eps, "forward_noise_batch")?;
    if x0.rank() == 0 || x0.dim(0) != ts.len() {
        return Err(Error::Shape(format!("{} timesteps for batch shape {:?}", ts.len(), x0.shape())));
    }
    let per = x0.numel() / ts.len();
    let mut out = x0.clone();
    let od = out.data_mut();
    for (n, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
        for i in n * per..(n + 1) * per {
            od[i] = a * od[i] + b * eps.data()[i];
        }
    }
    Ok(out)
}

/// Network output: the noise estimate is `(x_t - A) / (|1 - B| + 1e-5)`.
#[derive(Debug, Clone)]
pub struct AbPrediction<V> {
    pub a: V,
    pub b: V,
}

impl<V> AbPrediction<V> {
    pub fn map<U>(self, mut f: impl FnMut(V) -> U) -> AbPrediction<U> {
        AbPrediction { a: f(self.a), b: f(self.b) }
    }
}

pub fn ab_to_epsilon<T: Scalar>(x_t: &Tensor<T>, pred: &AbPrediction<Tensor<T>>) -> Result<Tensor<T>> {
    same_shape(x_t, &pred.a, "ab_to_epsilon A")?;
    same_shape(x_t, &pred.b, "ab_to_epsilon B")?;
    let one = T::one();
    let eps = T::c(AB_EPS);
    let num = x_t.zip_map(&pred.a, |x, a| x - a);
    Ok(num.zip_map(&pred.b, |n, b| n / ((one - b).abs() + eps)))
}

/// Differentiable [`ab_to_epsilon`].
pub fn ab_to_epsilon_var<T: Scalar>(x_t: &Var<T>, pred: &AbPrediction<Var<T>>) -> Result<Var<T>> {
    if x_t.shape() != pred.a.shape() || x_t.shape() != pred.b.shape() {
        return Err(Error::Shape(format!(
            "ab_to_epsilon: x_t {:?}, A {:?}, B {:?}",
            x_t.shape(),
            pred.a.shape(),
            pred.b.shape()
        )));
    }
    let denom = pred.b.neg().add_scalar(1.0).abs().add_scalar(AB_EPS);
    Ok(x_t.sub(&pred.a)?.div(&denom)?)
}

/// `p2(t) · mean((ε - ε̄)²)`.
pub fn weighted_loss<T: Scalar>(
    schedule: &NoiseSchedule,
    eps: &Tensor<T>,
    eps_bar: &Tensor<T>,
    t: f64,
) -> Result<f64> {
    same_shape(eps, eps_bar, "weighted_loss")?;
    let w = schedule.p2_weight(t)?;
    let mse = eps.data().iter().zip(eps_bar.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum::<f64>()
        / eps.numel().max(1) as f64;
    Ok(w * mse)
}

/// Batched, differentiable loss: the mean over samples of
/// `p2(t_n) · mean((ε_n - ε̄_n)²)`.
pub fn weighted_loss_var<T: Scalar>(
    schedule: &NoiseSchedule,
    eps: &Tensor<T>,
    eps_bar: &Var<T>,
    ts: &[f64],
) -> Result<Var<T>> {
    if eps.shape() != eps_bar.shape() || eps.dim(0) != ts.len() {
        return Err(Error::Shape(format!(
            "weighted_loss: ε {:?}, ε̄ {:?}, {} timesteps",
            eps.shape(),
            eps_bar.shape(),
            ts.len()
        )));
    }
    let n = ts.len();
    let per = eps.numel() / n;
    let mut w = Vec::with_capacity(n);
    for &t in ts {
        w.push(schedule.p2_weight(t)? / (per * n) as f64);
    }
    let mut wshape = vec![1; eps.rank()];
    wshape[0] = n;
    let weights = Var::constant(Tensor::from_f64(wshape, &w));
    let sq = eps_bar.sub(&Var::constant(eps.clone()))?.square();
    Ok(sq.mul(&weights)?.sum())
}

/// One DDPM update from grid point `i` to `i - 1`:
/// `(1/√α_i)(x_t - (1-α_i)/√(1-ᾱ_i)·ε̄) + σ_i·z`, with
/// `σ_i² = (1-α_i)(1-ᾱ_{i-1})/(1-ᾱ_i)` and `σ_1 = 0`.
pub fn ddpm_step<T: Scalar>(
    grid: &Discretization,
    x_t: &Tensor<T>,
    eps_bar: &Tensor<T>,
    i: usize,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape(x_t, eps_bar, "ddpm_step ε̄")?;
    same_shape(x_t, noise, "ddpm_step noise")?;
    let alpha = grid.alpha(i)?;
    let (ab, ab_prev) = (grid.alpha_bar(i), grid.alpha_bar(i - 1));
    let (mean_scale, eps_coef, sigma) = ddpm_coefficients(alpha, ab, ab_prev, i == 1);
    let (ms, ec, sg) = (T::c(mean_scale), T::c(eps_coef), T::c(sigma));
    let mut out = x_t.zip_map(eps_bar, |x, e| ms * (x - ec * e));
    if sigma != 0.0 {
        out = out.zip_map(noise, |m, z| m + sg * z);
    }
    Ok(out)
}

/// `(1/√α, (1-α)/√(1-ᾱ), σ)` for one step.
pub fn ddpm_coefficients(alpha: f64, alpha_bar: f64, alpha_bar_prev: f64, final_step: bool) -> (f64, f64, f64) {
    let one_minus_ab = 1.0 - alpha_bar;
    let eps_coef = if one_minus_ab > 0.0 { (1.0 - alpha) / one_minus_ab.sqrt() } else { 0.0 };
    let sigma = if final_step || one_minus_ab <= 0.0 {
        0.0
    } else {
        ((1.0 - alpha) * (1.0 - alpha_bar_prev) / one_minus_ab).max(0.0).sqrt()
    };
    (1.0 / alpha.sqrt(), eps_coef, sigma)
}

/// `ε_u + w·(ε_c - ε_u)`.
pub fn cfg_combine<T: Scalar>(eps_uncond: &Tensor<T>, eps_cond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    same_shape(eps_uncond, eps_cond, "cfg_combine")?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Domain(format!("guidance scale {w} must be finite and >= 0")));
    }
    let wc = T::c(w);
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + wc * (c - u)))
}

/// Which denoiser branches a guidance scale needs per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceBranches {
    /// `w = 0`: the combination is the unconditional prediction.
    Uncond,
    /// `w = 1`: the combination is the conditional prediction.
    Cond,
    Both,
}

impl GuidanceBranches {
    pub fn for_scale(w: f64) -> Self {
        if w == 0.0 {
            Self::Uncond
        } else if w == 1.0 {
            Self::Cond
        } else {
            Self::Both
        }
    }

    pub fn passes(self) -> usize {
        match self {
            Self::Both => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::<f64>::from_f64([1], &[v])
    }

    #[test]
    fn alpha_bar_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
        assert!(s.alpha_bar(1.0).unwrap() < 1e-3);
        assert!(s.alpha_bar(1.5).is_err());
        assert!(s.alpha_bar(-0.1).is_err());
    }

    #[test]
    fn alpha_bar_midpoint_matches_closed_form() {
        // cos²(0.508/1.008·π/2) / cos²(0.008/1.008·π/2), evaluated offline
        let v = NoiseSchedule::default().alpha_bar(0.5).unwrap();
        assert!((v - 0.493_843_590_440_637_75).abs() < 1e-14);
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::<f64>::from_f64([3], &[1.0, -2.0, 0.5]);
        let e = Tensor::<f64>::from_f64([3], &[0.3, 0.1, -9.0]);
        assert_eq!(forward_noise(&s, &x0, 0.0, &e).unwrap(), x0);
        let t = 0.37;
        let ab = s.alpha_bar(t).unwrap();
        let z = forward_noise(&s, &x0, t, &Tensor::<f64>::zeros([3])).unwrap();
        assert_eq!(z, x0.scale(ab.sqrt()));
        assert!(forward_noise(&s, &x0, t, &Tensor::<f64>::zeros([2])).is_err());
    }

    #[test]
    fn p2_examples() {
        assert_eq!(p2_from_alpha_bar(1.0), 0.0);
        assert!((p2_from_alpha_bar(1e-300) - 1.0).abs() < 1e-12);
        assert!((p2_from_alpha_bar(1.0 / 3.0) - 0.5).abs() < 1e-15);
        assert_eq!(NoiseSchedule::default().p2_weight(0.0).unwrap(), 0.0);
    }

    #[test]
    fn ab_examples() {
        let x = Tensor::<f64>::from_f64([2], &[1.5, -0.25]);
        let zero = AbPrediction { a: Tensor::<f64>::zeros([2]), b: Tensor::<f64>::zeros([2]) };
        let e = ab_to_epsilon(&x, &zero).unwrap();
        assert_eq!(e, x.map(|v| v / (1.0 + 1e-5)));
        let same = AbPrediction { a: x.clone(), b: Tensor::<f64>::from_f64([2], &[0.3, 7.0]) };
        assert_eq!(ab_to_epsilon(&x, &same).unwrap(), Tensor::<f64>::zeros([2]));
        let p = AbPrediction { a: t1(0.5), b: t1(0.5) };
        assert_eq!(ab_to_epsilon(&t1(1.5), &p).unwrap().item(), 1.0 / (0.5 + 1e-5));
    }

    #[test]
    fn ab_var_matches_tensor_version() {
        let x = Tensor::<f64>::from_f64([3], &[0.2, 1.0, -3.0]);
        let a = Tensor::<f64>::from_f64([3], &[0.1, -0.4, 0.7]);
        let b = Tensor::<f64>::from_f64([3], &[0.5, 2.5, 1.0]);
        let t = ab_to_epsilon(&x, &AbPrediction { a: a.clone(), b: b.clone() }).unwrap();
        let pv = AbPrediction { a: Var::constant(a), b: Var::constant(b) };
        let v = ab_to_epsilon_var(&Var::constant(x), &pv).unwrap();
        assert_eq!(v.value(), &t);
    }

    #[test]
    fn weighted_loss_examples() {
        let s = NoiseSchedule::default();
        let e = Tensor::<f64>::from_f64([2], &[1.0, 1.0]);
        assert_eq!(weighted_loss(&s, &e, &e, 0.7).unwrap(), 0.0);
        assert_eq!(weighted_loss(&s, &e, &Tensor::<f64>::zeros([2]), 0.0).unwrap(), 0.0);
        // ᾱ = 1/3 → p2 = 0.5; MSE of (1,1) vs (0,0) is 1.
        let mse: f64 = [1.0f64, 1.0].iter().map(|d| d * d).sum::<f64>() / 2.0;
        assert!((p2_from_alpha_bar(1.0 / 3.0) * mse - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weighted_loss_var_matches_scalar_version() {
        let s = NoiseSchedule::default();
        let e = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, -1.0, 2.0]);
        let eb = Tensor::<f64>::from_f64([2, 2], &[0.5, 0.5, 0.0, 0.0]);
        let ts = [0.3, 0.8];
        let v = weighted_loss_var(&s, &e, &Var::constant(eb.clone()), &ts).unwrap().value().item();
        let want = (weighted_loss(&s, &e.index0(0), &eb.index0(0), 0.3).unwrap()
            + weighted_loss(&s, &e.index0(1), &eb.index0(1), 0.8).unwrap())
            / 2.0;
        assert!((v - want).abs() < 1e-15);
    }

    #[test]
    fn grid_layout() {
        let s = NoiseSchedule::default();
        let g = s.grid(12).unwrap();
        assert_eq!(g.steps(), 12);
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(1), T_MIN);
        assert_eq!(g.t(12), 1.0);
        let g1 = s.grid(1).unwrap();
        assert_eq!((g1.t(0), g1.t(1)), (0.0, 1.0));
        assert!(s.grid(0).is_err());
        assert!(g.alpha(0).is_err());
    }

    #[test]
    fn ddpm_examples() {
        let s = NoiseSchedule::default();
        let g = s.grid(4).unwrap();
        let x = Tensor::<f64>::from_f64([2], &[0.7, -1.1]);
        let z = Tensor::<f64>::zeros([2]);
        let i = 3;
        let a = g.alpha(i).unwrap();
        let out = ddpm_step(&g, &x, &z, i, &z).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - v / a.sqrt()).abs() < 1e-12);
        }
        assert!(ddpm_step(&g, &x, &z, 0, &z).is_err());
        // α = 1 leaves x untouched
        let (ms, _, sg) = ddpm_coefficients(1.0, 0.5, 0.5, false);
        assert_eq!((ms, sg), (1.0, 0.0));
    }

    #[test]
    fn cfg_examples() {
        let u = Tensor::<f64>::from_f64([2], &[0.0, 1.0]);
        let c = Tensor::<f64>::from_f64([2], &[1.0, -1.0]);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&t1(0.0), &t1(1.0), 4.0).unwrap().item(), 4.0);
        assert!(cfg_combine(&u, &c, -1.0).is_err());
    }

    #[test]
    fn shape_spec_divisibility() {
        let s = ShapeSpec::new(64, 64, 3, 4, 4).unwrap();
        assert_eq!((s.latent_height, s.latent_width), (16, 16));
        assert!(ShapeSpec::new(63, 64, 3, 4, 4).is_err());
        assert!(ShapeSpec::new(64, 64, 3, 4, 0).is_err());
    }
}
