use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

impl<T: Scalar> Var<T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let in_shape = self.shape().to_vec();
        let out = self.value().reshape(shape)?;
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.reshape(in_shape.clone()).expect("reshape"))]),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let out = self.value().permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.permute(&inverse).expect("permute"))]),
        ))
    }

    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Var<T>> {
        let in_shape = self.shape().to_vec();
        let out = self.value().narrow(dim, start, len)?;
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let outer: usize = in_shape[..dim].iter().product();
                let inner: usize = in_shape[dim + 1..].iter().product();
                let d = in_shape[dim];
                let mut gx = Tensor::<T>::zeros(in_shape.clone());
                let dst = gx.data_mut();
                let src = g.data();
                for o in 0..outer {
                    let base = (o * d + start) * inner;
                    dst[base..base + len * inner]
                        .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat(parts: &[&Var<T>], dim: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat(&values, dim)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[dim]).collect();
        Ok(Var::from_op(
            out,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g, need| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|(&len, &n)| {
                        let piece = n.then(|| g.narrow(dim, start, len).expect("narrow"));
                        start += len;
                        piece
                    })
                    .collect()
            }),
        ))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<T>> {
        if self.value().rank() != 4 || factor == 0 {
            return Err(TensorError::Shape(format!(
                "upsample_nearest expects NCHW and factor >= 1, got {:?}",
                self.shape()
            )));
        }
        let (n, c, h, w) = self.value().dims4();
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value().data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                let row = &s[(y / factor) * w..(y / factor + 1) * w];
                for (x, v) in d[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                    *v = row[x / factor];
                }
            }
        }
        Ok(Var::from_op(
            Tensor::new([n, c, ho, wo], out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gs = g.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let s = &gs[p * ho * wo..(p + 1) * ho * wo];
                    let d = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        for x in 0..wo {
                            d[(y / factor) * w + x / factor] += s[y * wo + x];
                        }
                    }
                }
                vec![Some(Tensor::new([n, c, h, w], gx))]
            }),
        ))
    }

    /// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4();
        if c % (r * r) != 0 {
            return Err(TensorError::Shape(format!(
                "pixel_shuffle: {c} channels not divisible by {}",
                r * r
            )));
        }
        let co = c / (r * r);
        self.reshape([n, co, r, r, h, w])?
            .permute(&[0, 1, 4, 2, 5, 3])?
            .reshape([n, co, h * r, w * r])
    }

    /// `[N, C, H*r, W*r] -> [N, C*r*r, H, W]`.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4();
        if h % r != 0 || w % r != 0 {
            return Err(TensorError::Shape(format!(
                "pixel_unshuffle: {h}x{w} not divisible by {r}"
            )));
        }
        let (ho, wo) = (h / r, w / r);
        self.reshape([n, c, ho, r, wo, r])?
            .permute(&[0, 1, 3, 5, 2, 4])?
            .reshape([n, c * r * r, ho, wo])
    }
}
