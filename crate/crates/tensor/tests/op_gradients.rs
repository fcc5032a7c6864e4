//! Every differentiable op checked against central finite differences in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wurstkit_tensor::gradcheck;
use wurstkit_tensor::nn::{BatchNorm2d, CrossAttention, GlobalResponseNorm};
use wurstkit_tensor::{Conv2dSpec, ParamId, ParamStore, ResampleKernel, Session, Tensor, Var};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed)
}

/// Projects an output onto fixed random weights so every element matters.
fn project(y: &Var<f64>, seed: u64) -> Var<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Var::constant(Tensor::randn(y.shape().to_vec(), &mut r));
    y.mul(&w).unwrap().sum()
}

fn assert_grads<F>(store: &ParamStore<f64>, f: F)
where
    F: Fn(&Session<'_, f64>) -> Var<f64>,
{
    let mut r = rng();
    let coords = gradcheck::sample_coordinates(store, 40, &mut r);
    let samples = gradcheck::check(store, f, &coords, 1e-5);
    for s in &samples {
        assert!(
            s.rel_error(1e-7) < 1e-5,
            "{}[{}]: analytic {} numeric {}",
            s.param,
            s.index,
            s.analytic,
            s.numeric
        );
    }
}

fn param(store: &mut ParamStore<f64>, name: &str, shape: &[usize], r: &mut ChaCha8Rng) -> ParamId {
    store.scope("").param(name, Tensor::randn(shape.to_vec(), r))
}

#[test]
fn elementwise_and_broadcast() {
    let mut r = rng();
    let mut st = ParamStore::new();
    let a = param(&mut st, "a", &[2, 3, 4], &mut r);
    let b = param(&mut st, "b", &[3, 1], &mut r);
    let c = st.scope("").param("c", Tensor::rand_uniform([4], 0.5, 2.0, &mut r));
    assert_grads(&st, |s| {
        let (a, b, c) = (s.param(a), s.param(b), s.param(c));
        let y = a.mul(&b).unwrap().add(&c).unwrap().div(&c).unwrap().sub(&b).unwrap();
        let y = y.gelu().add(&y.tanh()).unwrap().add(&y.silu()).unwrap();
        let y = y.add(&c.sqrt()).unwrap().add(&c.ln()).unwrap().add(&y.sigmoid().exp()).unwrap();
        project(&y, 1)
    });
}

#[test]
fn reductions_and_shapes() {
    let mut r = rng();
    let mut st = ParamStore::new();
    let a = param(&mut st, "a", &[2, 3, 4, 6], &mut r);
    let b = param(&mut st, "b", &[2, 2, 4, 6], &mut r);
    assert_grads(&st, |s| {
        let (a, b) = (s.param(a), s.param(b));
        let cat = Var::concat(&[&a, &b], 1).unwrap();
        let m = cat.mean_dims(&[2, 3]).unwrap();
        let y = cat.mul(&m).unwrap().narrow(1, 1, 3).unwrap();
        let y = y.pixel_unshuffle(2).unwrap().permute(&[0, 2, 3, 1]).unwrap();
        let y = y.reshape([2, 2 * 3, 12]).unwrap().permute(&[0, 2, 1]).unwrap();
        let up = a.upsample_nearest(2).unwrap().pixel_unshuffle(2).unwrap();
        project(&y, 2).add(&project(&up, 3)).unwrap()
    });
}

#[test]
fn matmul_linear_softmax() {
    let mut r = rng();
    let mut st = ParamStore::new();
    let a = param(&mut st, "a", &[2, 3, 4], &mut r);
    let b = param(&mut st, "b", &[2, 5, 4], &mut r);
    let w = param(&mut st, "w", &[6, 4], &mut r);
    let bias = param(&mut st, "bias", &[6], &mut r);
    assert_grads(&st, |s| {
        let (a, b, w, bias) = (s.param(a), s.param(b), s.param(w), s.param(bias));
        let att = a.bmm(&b, false, true).unwrap().softmax().unwrap();
        let o = att.bmm(&b, false, false).unwrap();
        let o2 = a.bmm(&a, true, false).unwrap();
        let l = o.linear(&w, Some(&bias)).unwrap();
        project(&l, 4).add(&project(&o2, 5)).unwrap()
    });
}

#[test]
fn convolutions() {
    let mut r = rng();
    let mut st = ParamStore::new();
    let x = param(&mut st, "x", &[2, 3, 7, 6], &mut r);
    let w3 = param(&mut st, "w3", &[4, 3, 3, 3], &mut r);
    let w4 = param(&mut st, "w4", &[4, 3, 4, 4], &mut r);
    let w1 = param(&mut st, "w1", &[5, 3, 1, 1], &mut r);
    let b = param(&mut st, "b", &[4], &mut r);
    let dw = param(&mut st, "dw", &[3, 1, 5, 5], &mut r);
    let db = param(&mut st, "db", &[3], &mut r);
    let wt = param(&mut st, "wt", &[3, 2, 4, 4], &mut r);
    let bt = param(&mut st, "bt", &[2], &mut r);
    assert_grads(&st, |s| {
        let x = s.param(x);
        let y1 = x.conv2d(&s.param(w3), Some(&s.param(b)), Conv2dSpec { stride: 1, padding: 1 }).unwrap();
        let y2 = x.conv2d(&s.param(w4), None, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
        let y3 = x.conv2d(&s.param(w1), None, Conv2dSpec::default()).unwrap();
        let y4 = x.depthwise_conv2d(&s.param(dw), Some(&s.param(db)), 2).unwrap();
        let y5 = x.conv_transpose2d(&s.param(wt), Some(&s.param(bt)), Conv2dSpec { stride: 2, padding: 1 }).unwrap();
        [project(&y1, 6), project(&y2, 7), project(&y3, 8), project(&y4, 9), project(&y5, 10)]
            .iter()
            .fold(Var::constant(Tensor::scalar(0.0)), |acc, v| acc.add(v).unwrap())
    });
}

#[test]
fn normalizations() {
    let mut r = rng();
    let mut st = ParamStore::new();
    let x = param(&mut st, "x", &[3, 4, 3, 5], &mut r);
    let g = param(&mut st, "g", &[4], &mut r);
    let b = param(&mut st, "b", &[4], &mut r);
    let g5 = param(&mut st, "g5", &[5], &mut r);
    let bn = BatchNorm2d::new(&mut st.scope("bn"), 4);
    let grn = GlobalResponseNorm::new(&mut st.scope("grn"), 4);
    // non-zero GRN affine so its branch contributes
    st.set(grn.gamma, Tensor::randn([1, 4, 1, 1], &mut r)).unwrap();
    st.set(grn.beta, Tensor::randn([1, 4, 1, 1], &mut r)).unwrap();
    assert_grads(&st, |s| {
        let x = s.param(x);
        let y1 = x.channel_norm(Some(&s.param(g)), Some(&s.param(b)), 1e-6).unwrap();
        let y2 = x.layer_norm(Some(&s.param(g5)), None, 1e-6).unwrap();
        let y3 = bn.forward(s, &x).unwrap();
        let y4 = grn.forward(s, &x).unwrap();
        project(&y1, 11)
            .add(&project(&y2, 12))
            .unwrap()
            .add(&project(&y3, 13))
            .unwrap()
            .add(&project(&y4, 14))
            .unwrap()
    });
}

#[test]
fn resize_embedding_attention_cross_entropy() {
    let mut r = rng();
    let mut st = ParamStore::new();
    let x = param(&mut st, "x", &[1, 2, 4, 5], &mut r);
    let table = param(&mut st, "table", &[7, 8], &mut r);
    let ctx = param(&mut st, "ctx", &[2, 3, 6], &mut r);
    let att = CrossAttention::new(&mut st.scope("att"), 8, 6, 2, &mut r);
    assert_grads(&st, |s| {
        let x = s.param(x);
        let y1 = x.resize(7, 3, ResampleKernel::Bicubic).unwrap();
        let y2 = x.resize(2, 9, ResampleKernel::Bilinear).unwrap();
        let e = s.param(table).gather_rows(&[1, 3, 3, 0, 6, 2, 1, 5], &[2, 4]).unwrap();
        let a = att.forward(s, &e, &s.param(ctx)).unwrap();
        let logits = a.reshape([8, 8]).unwrap();
        let ce = logits.cross_entropy(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        project(&y1, 15).add(&project(&y2, 16)).unwrap().add(&ce).unwrap()
    });
}
