use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Normalizes `groups` independent vectors of length `len`, where element `j`
/// of vector `g` lives at `base(g) + j * stride`. Returns `(xhat, inv_std)`.
fn normalize_strided<T: Scalar>(
    x: &[T],
    groups: usize,
    len: usize,
    offset: impl Fn(usize, usize) -> usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); groups];
    let n = T::c(len as f64);
    for g in 0..groups {
        let mut mean = T::zero();
        for j in 0..len {
            mean += x[offset(g, j)];
        }
        mean /= n;
        let mut var = T::zero();
        for j in 0..len {
            let d = x[offset(g, j)] - mean;
            var += d * d;
        }
        var /= n;
        let is = T::one() / (var + eps).sqrt();
        inv[g] = is;
        for j in 0..len {
            let o = offset(g, j);
            xhat[o] = (x[o] - mean) * is;
        }
    }
    (xhat, inv)
}

/// Backward of `xhat = (x - mean) * inv_std` given `dxhat`:
/// `dx = inv/N * (N*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))`.
fn normalize_backward<T: Scalar>(
    dxhat: &[T],
    xhat: &[T],
    inv: &[T],
    len: usize,
    offset: impl Fn(usize, usize) -> usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); xhat.len()];
    let n = T::c(len as f64);
    for (g, &is) in inv.iter().enumerate() {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..len {
            let o = offset(g, j);
            s1 += dxhat[o];
            s2 += dxhat[o] * xhat[o];
        }
        for j in 0..len {
            let o = offset(g, j);
            dx[o] = is / n * (n * dxhat[o] - s1 - xhat[o] * s2);
        }
    }
    dx
}

/// Applies `y = xhat * gamma[ch] + beta[ch]` and returns the op result with
/// a backward pass through the normalization.
#[allow(clippy::too_many_arguments)]
fn affine_norm_op<T: Scalar>(
    input: &Var<T>,
    gamma: Option<&Var<T>>,
    beta: Option<&Var<T>>,
    xhat: Vec<T>,
    inv: Vec<T>,
    len: usize,
    channel_of: impl Fn(usize) -> usize + Clone + 'static,
    offset: impl Fn(usize, usize) -> usize + Clone + 'static,
) -> Var<T> {
    let shape = input.shape().to_vec();
    let mut y = xhat.clone();
    let gvals = gamma.map(|g| g.value().clone());
    let bvals = beta.map(|b| b.value().clone());
    if gvals.is_some() || bvals.is_some() {
        for (i, v) in y.iter_mut().enumerate() {
            let ch = channel_of(i);
            if let Some(gv) = &gvals {
                *v *= gv.data()[ch];
            }
            if let Some(bv) = &bvals {
                *v += bv.data()[ch];
            }
        }
    }
    let mut parents = vec![input.clone()];
    parents.extend(gamma.cloned());
    parents.extend(beta.cloned());
    let has_gamma = gamma.is_some();
    let has_beta = beta.is_some();
    let channels = gvals.as_ref().or(bvals.as_ref()).map(|t| t.numel()).unwrap_or(0);
    Var::from_op(
        Tensor::new(shape.clone(), y),
        parents,
        Box::new(move |g, need| {
            let gd = g.data();
            let mut res = Vec::new();
            let gx = need[0].then(|| {
                let dxhat: Vec<T> = match &gvals {
                    Some(gv) => gd.iter().enumerate().map(|(i, &v)| v * gv.data()[channel_of(i)]).collect(),
                    None => gd.to_vec(),
                };
                Tensor::new(shape.clone(), normalize_backward(&dxhat, &xhat, &inv, len, offset.clone()))
            });
            res.push(gx);
            let mut idx = 1;
            if has_gamma {
                res.push(need[idx].then(|| {
                    let mut d = vec![T::zero(); channels];
                    for (i, (&gv, &xh)) in gd.iter().zip(&xhat).enumerate() {
                        d[channel_of(i)] += gv * xh;
                    }
                    Tensor::new([channels], d)
                }));
                idx += 1;
            }
            if has_beta {
                res.push(need[idx].then(|| {
                    let mut d = vec![T::zero(); channels];
                    for (i, &gv) in gd.iter().enumerate() {
                        d[channel_of(i)] += gv;
                    }
                    Tensor::new([channels], d)
                }));
            }
            res
        }),
    )
}

impl<T: Scalar> Var<T> {
    /// Layer normalization over the last dimension.
    pub fn layer_norm(&self, gamma: Option<&Var<T>>, beta: Option<&Var<T>>, eps: f64) -> Result<Var<T>> {
        let d = *self.shape().last().ok_or_else(|| TensorError::Shape("layer_norm on scalar".into()))?;
        for p in gamma.iter().chain(beta.iter()) {
            if p.shape() != [d] {
                return Err(TensorError::Shape(format!(
                    "layer_norm affine shape {:?} does not match dim {d}",
                    p.shape()
                )));
            }
        }
        let groups = self.value().numel() / d;
        let (xhat, inv) = normalize_strided(self.value().data(), groups, d, move |g, j| g * d + j, T::c(eps));
        Ok(affine_norm_op(self, gamma, beta, xhat, inv, d, move |i| i % d, move |g, j| g * d + j))
    }

    /// Normalizes each spatial position of an NCHW tensor across channels
    /// (ConvNeXt-style channel layer norm).
    pub fn channel_norm(&self, gamma: Option<&Var<T>>, beta: Option<&Var<T>>, eps: f64) -> Result<Var<T>> {
        if self.value().rank() != 4 {
            return Err(TensorError::Shape(format!("channel_norm expects NCHW, got {:?}", self.shape())));
        }
        let (n, c, h, w) = self.value().dims4();
        let hw = h * w;
        let x = self.value().data();
        // group = (batch, position); vector runs over channels at stride hw
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv = vec![T::zero(); n * hw];
        let nf = T::c(c as f64);
        let epsv = T::c(eps);
        for b in 0..n {
            let base = b * c * hw;
            let mut mean = vec![T::zero(); hw];
            for ci in 0..c {
                for (m, v) in mean.iter_mut().zip(&x[base + ci * hw..base + (ci + 1) * hw]) {
                    *m += *v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut var = vec![T::zero(); hw];
            for ci in 0..c {
                for ((s, v), m) in var.iter_mut().zip(&x[base + ci * hw..base + (ci + 1) * hw]).zip(&mean) {
                    let d = *v - *m;
                    *s += d * d;
                }
            }
            for (p, s) in var.iter().enumerate() {
                inv[b * hw + p] = T::one() / (*s / nf + epsv).sqrt();
            }
            for ci in 0..c {
                let o = base + ci * hw;
                for p in 0..hw {
                    xhat[o + p] = (x[o + p] - mean[p]) * inv[b * hw + p];
                }
            }
        }
        let offset = move |g: usize, j: usize| (g / hw) * c * hw + j * hw + g % hw;
        Ok(affine_norm_op(self, gamma, beta, xhat, inv, c, move |i| (i / hw) % c, offset))
    }

    /// Training-mode batch normalization of an NCHW tensor over `(N, H, W)`.
    /// Returns the output plus the batch mean and (biased) variance per channel.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<(Var<T>, Tensor<T>, Tensor<T>)> {
        if self.value().rank() != 4 {
            return Err(TensorError::Shape(format!("batch_norm expects NCHW, got {:?}", self.shape())));
        }
        let (n, c, h, w) = self.value().dims4();
        let hw = h * w;
        let len = n * hw;
        let offset = move |g: usize, j: usize| ((j / hw) * c + g) * hw + j % hw;
        let x = self.value().data();
        let (xhat, inv) = normalize_strided(x, c, len, offset, T::c(eps));
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for j in 0..len {
                s += x[offset(ci, j)];
            }
            mean[ci] = s / T::c(len as f64);
            var[ci] = T::one() / (inv[ci] * inv[ci]) - T::c(eps);
        }
        let out = affine_norm_op(self, Some(gamma), Some(beta), xhat, inv, len, move |i| (i / hw) % c, offset);
        Ok((out, Tensor::new([c], mean), Tensor::new([c], var)))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self) -> Result<Var<T>> {
        let d = *self.shape().last().ok_or_else(|| TensorError::Shape("softmax on scalar".into()))?;
        let mut y = self.value().data().to_vec();
        for row in y.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let yt = Tensor::new(self.shape().to_vec(), y);
        let yc = yt.clone();
        Ok(Var::from_op(
            yt,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = g.data().to_vec();
                for (grow, yrow) in gx.chunks_mut(d).zip(yc.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(Tensor::new(yc.shape().to_vec(), gx))]
            }),
        ))
    }

    /// Mean cross-entropy of logits `[N, K]` against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<T>> {
        if self.value().rank() != 2 || self.shape()[0] != labels.len() {
            return Err(TensorError::Shape(format!(
                "cross_entropy expects [N, K] logits for {} labels, got {:?}",
                labels.len(),
                self.shape()
            )));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value().data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
            loss -= row[l].ln();
        }
        let nf = T::c(n as f64);
        let labels = labels.to_vec();
        Ok(Var::from_op(
            Tensor::scalar(loss / nf),
            vec![self.clone()],
            Box::new(move |g, _| {
                let scale = g.item() / nf;
                let mut gx = probs.clone();
                for (row, &l) in gx.chunks_mut(k).zip(&labels) {
                    row[l] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(Tensor::new([n, k], gx))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_norm_matches_permuted_layer_norm() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 5, 3, 4], &mut rng);
        let a = Var::constant(x.clone()).channel_norm(None, None, 1e-6).unwrap();
        let b = Var::constant(x.permute(&[0, 2, 3, 1]).unwrap())
            .layer_norm(None, None, 1e-6)
            .unwrap()
            .permute(&[0, 3, 1, 2])
            .unwrap();
        for (u, v) in a.value().data().iter().zip(b.value().data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Var::constant(Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., -1., 0., 1000.]));
        let y = x.softmax().unwrap();
        for row in y.value().data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
