//! Property tests for the invariants of every component.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wurstkit::compressor::{flatten_semantic, unflatten_semantic};
use wurstkit::diffusion::*;
use wurstkit::eval::manipulate::{manipulate, Manipulation, ResampleKind};
use wurstkit::eval::{fid, inception_score, FeatureStats};
use wurstkit::stage_a::{lookup, quantize};
use wurstkit::stage_b::{BConditioning, StageB, StageBConfig};
use wurstkit::stage_c::{StageC, StageCConfig};
use wurstkit::tensor::optim::warmup_lr;
use wurstkit::tensor::{ParamStore, Session, Tensor, Var};
use wurstkit::text::{TextConfig, TextEncoder};
use wurstkit::training::checkpoint::{interpolate_weights, Checkpoint};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shape_spec_is_exact(h in 1usize..40, w in 1usize..40, f in 1usize..9, c in 1usize..5, z in 1usize..9) {
        let s = ShapeSpec::new(h * f, w * f, c, z, f).unwrap();
        prop_assert_eq!(s.height, s.factor * s.latent_height);
        prop_assert_eq!(s.width, s.factor * s.latent_width);
        prop_assert!(s.latent_height >= 1 && s.latent_width >= 1);
        if f > 1 {
            prop_assert!(ShapeSpec::new(h * f + 1, w * f, c, z, f).is_err());
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing(i in 0usize..1000, gap in 1usize..50, offset in 0.001f64..0.1) {
        let s = NoiseSchedule::cosine(offset).unwrap();
        let t1 = i as f64 * 1e-3;
        let t2 = ((i + gap).min(1000)) as f64 * 1e-3;
        prop_assume!(t2 > t1);
        let (a1, a2) = (s.alpha_bar(t1).unwrap(), s.alpha_bar(t2).unwrap());
        prop_assert!(a1 > a2);
        prop_assert!(a2 > 0.0 && a1 <= 1.0);
    }

    #[test]
    fn grid_alphas_telescope(steps in 1usize..200, k_frac in 0.0f64..1.0) {
        let g = NoiseSchedule::default().grid(steps).unwrap();
        let k = 1 + ((steps - 1) as f64 * k_frac) as usize;
        let prod: f64 = (1..=k).map(|i| g.alpha(i).unwrap()).product();
        prop_assert!(rel(prod, g.alpha_bar(k) / g.alpha_bar(0)) < 1e-9);
        for i in 1..=steps {
            let a = g.alpha(i).unwrap();
            prop_assert!(a > 0.0 && a <= 1.0);
        }
    }

    #[test]
    fn p2_increasing_and_bounded(t1 in 0.0f64..1.0, dt in 1e-3f64..1.0) {
        let s = NoiseSchedule::default();
        let t2 = (t1 + dt).min(1.0);
        prop_assume!(t2 > t1);
        let (p1, p2) = (s.p2_weight(t1).unwrap(), s.p2_weight(t2).unwrap());
        prop_assert!(p1 < p2);
        prop_assert!((0.0..1.0).contains(&p1) && (0.0..1.0).contains(&p2));
    }

    #[test]
    fn one_step_inversion(seed in any::<u64>(), n in 1usize..32) {
        let mut r = rng(seed);
        let g = NoiseSchedule::default().grid(1).unwrap();
        let x0 = Tensor::<f64>::randn([n], &mut r);
        let eps = Tensor::<f64>::randn([n], &mut r);
        let xt = Tensor::from_f64([n], &x0.data().iter().zip(eps.data())
            .map(|(x, e)| g.alpha_bar(1).sqrt() * x + (1.0 - g.alpha_bar(1)).sqrt() * e).collect::<Vec<_>>());
        let back = ddpm_step(&g, &xt, &eps, 1, &Tensor::zeros([n])).unwrap();
        for (b, x) in back.data().iter().zip(x0.data()) {
            prop_assert!((b - x).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn ab_to_epsilon_lipschitz_in_a(seed in any::<u64>(), n in 1usize..16) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn([n], &mut r);
        let b = Tensor::<f64>::randn([n], &mut r).scale(2.0);
        let a1 = Tensor::<f64>::randn([n], &mut r);
        let a2 = Tensor::<f64>::randn([n], &mut r);
        let e1 = ab_to_epsilon(&x, &AbPrediction { a: a1.clone(), b: b.clone() }).unwrap();
        let e2 = ab_to_epsilon(&x, &AbPrediction { a: a2.clone(), b: b.clone() }).unwrap();
        let min_gap = b.data().iter().map(|v| (1.0 - v).abs()).fold(f64::INFINITY, f64::min);
        let lip = 1.0 / (min_gap + AB_EPS);
        let de = e1.sub(&e2).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let da = a1.sub(&a2).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(de <= lip * da * (1.0 + 1e-12));
    }

    #[test]
    fn cfg_fixed_point(seed in any::<u64>(), w in 0.0f64..20.0, n in 1usize..16) {
        let e = Tensor::<f64>::randn([n], &mut rng(seed));
        let out = cfg_combine(&e, &e, w).unwrap();
        for (o, v) in out.data().iter().zip(e.data()) {
            prop_assert!((o - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn quantization_is_nearest_and_valid(seed in any::<u64>(), k in 2usize..65, z in 1usize..5, h in 1usize..4) {
        let mut r = rng(seed);
        let cb = Tensor::<f64>::randn([k, z], &mut r);
        let lat = Tensor::<f64>::randn([2, z, h, h], &mut r);
        let (idx, q) = quantize(&lat, &cb).unwrap();
        prop_assert_eq!(idx.len(), 2 * h * h);
        prop_assert!(idx.iter().all(|&i| i < k));
        prop_assert_eq!(&q, &lookup(&cb, &idx, 2, h, h).unwrap());
        let plane = h * h;
        for (cell, &chosen) in idx.iter().enumerate() {
            let (n, p) = (cell / plane, cell % plane);
            let v: Vec<f64> = (0..z).map(|c| lat.data()[(n * z + c) * plane + p]).collect();
            let d = |e: usize| (0..z).map(|c| (v[c] - cb.data()[e * z + c]).powi(2)).sum::<f64>();
            for e in 0..k {
                prop_assert!(d(chosen) <= d(e));
            }
        }
    }

    #[test]
    fn flatten_roundtrip(seed in any::<u64>(), n in 1usize..3, c in 1usize..17, h in 1usize..6, w in 1usize..6) {
        let x = Tensor::<f32>::randn([n, c, h, w], &mut rng(seed));
        let t = flatten_semantic(&x).unwrap();
        prop_assert_eq!(t.shape(), &[n, h * w, c]);
        prop_assert_eq!(unflatten_semantic(&t, h, w).unwrap(), x);
    }

    #[test]
    fn text_embeddings_deterministic_and_fixed_shape(caption in "[a-z ]{0,40}", seed in 0u64..4) {
        let cfg = TextConfig::default();
        let mut st = ParamStore::<f32>::new();
        let enc = TextEncoder::new(cfg.clone(), &mut st, "t", &mut rng(seed)).unwrap();
        let a = enc.encode_tensor(&st, &[caption.as_str()]).unwrap();
        let b = enc.encode_tensor(&st, &[caption.as_str()]).unwrap();
        prop_assert_eq!(a.shape(), &[1, cfg.max_len, cfg.dim]);
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fid_symmetric_nonnegative(seed in any::<u64>(), d in 1usize..6) {
        let mut r = rng(seed);
        let mk = |r: &mut ChaCha8Rng| {
            let rows: Vec<Vec<f64>> = (0..3 * d + 4).map(|_| Tensor::<f64>::randn([d], r).data().to_vec()).collect();
            FeatureStats::from_rows(&rows, d).unwrap()
        };
        let (a, b) = (mk(&mut r), mk(&mut r));
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn fid_shared_covariance_is_mean_distance(seed in any::<u64>(), d in 1usize..6) {
        let mut r = rng(seed);
        let m = DMatrix::from_fn(d, d, |_, _| Tensor::<f64>::randn([1], &mut r).item());
        let cov = &m * m.transpose() + DMatrix::identity(d, d);
        let mu1 = DVector::from_fn(d, |i, _| i as f64 * 0.3);
        let shift = DVector::from_fn(d, |_, _| Tensor::<f64>::randn([1], &mut r).item());
        let a = FeatureStats::from_moments(mu1.clone(), cov.clone(), 100).unwrap();
        let b = FeatureStats::from_moments(&mu1 + &shift, cov, 100).unwrap();
        prop_assert!((fid(&a, &b).unwrap() - shift.norm_squared()).abs() <= 1e-6 * shift.norm_squared().max(1.0));
    }

    #[test]
    fn inception_score_within_bounds(seed in any::<u64>(), n in 1usize..20, k in 2usize..12) {
        let mut r = rng(seed);
        let probs: Vec<Vec<f64>> = (0..n).map(|_| {
            let v = Tensor::<f64>::rand_uniform([k], 1e-6, 1.0, &mut r).data().iter().map(|x| x.powi(4)).collect::<Vec<_>>();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        }).collect();
        let is = inception_score(&probs).unwrap();
        prop_assert!((1.0..=k as f64).contains(&is));
    }

    #[test]
    fn manipulations_keep_shape_and_range(seed in any::<u64>(), which in 0usize..8, amount in -0.5f64..0.5) {
        let img = Tensor::<f32>::rand_uniform([3, 16, 16], 0.0, 1.0, &mut rng(seed));
        let m = [
            Manipulation::Identity,
            Manipulation::Jpeg(5 + (seed % 96) as u8),
            Manipulation::Resample(ResampleKind::Nearest),
            Manipulation::Resample(ResampleKind::Bilinear),
            Manipulation::Palette256,
            Manipulation::Brightness(amount),
            Manipulation::Contrast(amount),
            Manipulation::Jpeg(100),
        ][which];
        let out = manipulate(&img, m, 8).unwrap();
        // resampling is the resize to the extractor input itself
        let want: &[usize] = if matches!(m, Manipulation::Resample(_)) { &[3, 8, 8] } else { img.shape() };
        prop_assert_eq!(out.shape(), want);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let parsed: Manipulation = m.to_string().parse().unwrap();
        prop_assert_eq!(parsed.to_string(), m.to_string());
    }

    #[test]
    fn warmup_exact_at_integer_steps(base in 1e-6f64..1.0, warmup in 0u64..500, step in 0u64..1000) {
        let lr = warmup_lr(base, warmup, step);
        if warmup == 0 || step >= warmup {
            prop_assert_eq!(lr, base);
        } else {
            prop_assert_eq!(lr, base * step as f64 / warmup as f64);
            prop_assert!(lr < base);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_interpolation(seed in any::<u64>(), sizes in prop::collection::vec(1usize..20, 1..5), lambda in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let mk = |r: &mut ChaCha8Rng| {
            let mut c = Checkpoint::new("stage-c", 3, serde_json::json!({"k": 1}));
            for (i, &s) in sizes.iter().enumerate() {
                c.insert(format!("c.t{i}"), Tensor::randn([s], r)).unwrap();
            }
            c
        };
        let (a, b) = (mk(&mut r), mk(&mut r));
        let bytes = a.to_bytes().unwrap();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
        let m = interpolate_weights(&a, &b, lambda).unwrap();
        for i in 0..sizes.len() {
            let name = format!("c.t{i}");
            let (ta, tb, tm) = (a.get(&name).unwrap(), b.get(&name).unwrap(), m.get(&name).unwrap());
            for ((x, y), z) in ta.data().iter().zip(tb.data()).zip(tm.data()) {
                let lo = x.min(*y) - 1e-6;
                let hi = x.max(*y) + 1e-6;
                prop_assert!(*z >= lo && *z <= hi);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn stage_b_preserves_latent_shape(seed in any::<u64>(), hq in 1usize..4, wq in 1usize..4, n in 1usize..3) {
        let mut r = rng(seed);
        let cfg = StageBConfig { widths: vec![8, 16], blocks: vec![1, 1], heads: vec![0, 2], text_dim: 8, time_dim: 8, ..Default::default() };
        let mut st = ParamStore::<f32>::new();
        let b = StageB::new(cfg.clone(), &mut st, "b", &mut r).unwrap();
        let s = Session::eval(&st);
        let (h, w) = (hq * cfg.stride(), wq * cfg.stride());
        let x = Var::constant(Tensor::randn([n, 4, h, w], &mut r));
        let sem = Var::constant(Tensor::randn([n, 16, 4, 4], &mut r));
        let text = Var::constant(Tensor::randn([n, 8, 8], &mut r));
        let ts: Vec<f64> = (0..n).map(|i| 0.2 + 0.3 * i as f64).collect();
        let p = b.predict(&s, &x, &ts, &BConditioning { semantic: Some(&sem), text: &text }).unwrap();
        prop_assert_eq!(p.a.shape(), x.shape());
        prop_assert_eq!(p.b.shape(), x.shape());
    }

    #[test]
    fn stage_c_preserves_resolution(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let cfg = StageCConfig { blocks: 2, width: 16, heads: 2, text_dim: 8, time_dim: 8, text_dropout: 0.0 };
        let mut st = ParamStore::<f32>::new();
        let c = StageC::new(cfg, &mut st, "c", &mut r).unwrap();
        let s = Session::eval(&st);
        let x = Var::constant(Tensor::randn([2, 16, h, w], &mut r));
        let text = Var::constant(Tensor::randn([2, 5, 8], &mut r));
        let p = c.predict(&s, &x, &[0.1, 0.9], &text).unwrap();
        prop_assert_eq!(p.a.shape(), x.shape());
        prop_assert_eq!(p.b.shape(), x.shape());
    }
}

#[test]
fn forward_noise_variance_matches_schedule() {
    let s = NoiseSchedule::default();
    let mut r = rng(11);
    for t in [0.1, 0.5, 0.9] {
        let eps = Tensor::<f64>::randn([20_000], &mut r);
        let x = forward_noise(&s, &Tensor::zeros([20_000]), t, &eps).unwrap();
        let mean = x.data().iter().sum::<f64>() / 20_000.0;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19_999.0;
        let want = 1.0 - s.alpha_bar(t).unwrap();
        assert!(rel(var, want) < 0.05, "t={t}: {var} vs {want}");
    }
}
