use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::{Result, TensorError};

/// Dense row-major n-dimensional array with shared, copy-on-write storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the (higher or equal rank) `target`, with
/// zero stride on broadcast dimensions.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset {
                0
            } else {
                let d = shape[i - offset];
                if d == 1 && target[i] != 1 {
                    0
                } else {
                    own[i - offset]
                }
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
/// The innermost dimension is walked in a tight loop.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        f(o * inner, oa, ob, inner, ia, ib);
        // odometer over the outer dims
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data: Arc::new(data) }
    }

    pub fn try_new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::new(Vec::<usize>::new(), vec![v])
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| T::c(v)).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| T::c(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::new(shape, data)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n).map(|_| T::c(rng.gen_range(lo..hi))).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.f64() as f32).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| U::c(v.f64())).collect())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self::new(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Broadcasting elementwise combination.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(self.zip_map(other, f));
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (a, b) = (self.data(), other.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, oa, ob, len, ia, ib| {
            let dst = &mut out[o..o + len];
            match (ia, ib) {
                (1, 1) => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = f(a[oa + i], b[ob + i]);
                    }
                }
                (1, 0) => {
                    let bv = b[ob];
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = f(a[oa + i], bv);
                    }
                }
                (0, 1) => {
                    let av = a[oa];
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = f(av, b[ob + i]);
                    }
                }
                _ => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = f(a[oa + i * ia], b[ob + i * ib]);
                    }
                }
            }
        });
        Ok(Self::new(out_shape, out))
    }

    /// Expands to `shape` following broadcast rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let target = broadcast_shape(&self.shape, shape)?;
        if target != shape {
            return Err(TensorError::Shape(format!(
                "cannot broadcast {:?} to {shape:?}",
                self.shape
            )));
        }
        Self::zeros(shape.to_vec()).broadcast_zip(self, |_, b| b)
    }

    /// Sums over broadcast dimensions so the result has `shape`; the inverse
    /// of [`Tensor::broadcast_to`] for gradients.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let check = broadcast_shape(shape, &self.shape)?;
        if check != self.shape {
            return Err(TensorError::Shape(format!(
                "cannot reduce {:?} to {shape:?}",
                self.shape
            )));
        }
        let out_strides = broadcast_strides(shape, &self.shape);
        let zero = vec![0usize; self.rank()];
        let mut out = vec![T::zero(); numel(shape)];
        let src = self.data();
        for_each_broadcast(&self.shape, &out_strides, &zero, |o, oa, _, len, ia, _| {
            if ia == 0 {
                let mut acc = T::zero();
                for v in &src[o..o + len] {
                    acc += *v;
                }
                out[oa] += acc;
            } else {
                for i in 0..len {
                    out[oa + i * ia] += src[o + i];
                }
            }
        });
        Ok(Self::new(shape.to_vec(), out))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.rank() {
            return Err(TensorError::Shape(format!(
                "permutation {perm:?} does not match rank of {:?}",
                self.shape
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(TensorError::Shape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let src_strides = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let zero = vec![0usize; perm.len()];
        let mut out = vec![T::zero(); self.numel()];
        let src = self.data();
        for_each_broadcast(&out_shape, &gather, &zero, |o, oa, _, len, ia, _| {
            for i in 0..len {
                out[o + i] = src[oa + i * ia];
            }
        });
        Ok(Self::new(out_shape, out))
    }

    /// Copies `len` entries starting at `start` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Self> {
        if dim >= self.rank() || start + len > self.shape[dim] {
            return Err(TensorError::Shape(format!(
                "narrow({dim}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..dim].iter().product();
        let inner: usize = self.shape[dim + 1..].iter().product();
        let d = self.shape[dim];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[dim] = len;
        Ok(Self::new(shape, out))
    }

    pub fn concat(parts: &[&Self], dim: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        if dim >= first.rank() {
            return Err(TensorError::Shape(format!("concat dim {dim} out of range")));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == dim || a == b);
            if !ok {
                return Err(TensorError::Shape(format!(
                    "concat shape mismatch {:?} vs {:?} along {dim}",
                    p.shape, first.shape
                )));
            }
        }
        let outer: usize = first.shape[..dim].iter().product();
        let inner: usize = first.shape[dim + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[dim]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[dim] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[dim] = total;
        Ok(Self::new(shape, out))
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other` (same shape).
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::c(self.numel() as f64)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Selects the `i`-th slice along the leading dimension.
    pub fn index0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self::new(self.shape[1..].to_vec(), self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::Shape(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::new(shape, data))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<T> = self.data.iter().take(8).copied().collect();
        write!(f, "Tensor<{}>{:?} {:?}", T::DTYPE, self.shape, head)?;
        if self.numel() > 8 {
            write!(f, "...")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_reduce_are_adjoint_in_shape() {
        let a = Tensor::<f64>::from_f64([2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_f64([4, 1], &[10., 20., 30., 40.]);
        let c = a.broadcast_zip(&b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        assert_eq!(c.data()[0], 11.);
        assert_eq!(c.data()[23], 46.);
        let r = c.sum_to_shape(&[4, 1]).unwrap();
        // each row of b appears 6 times, plus the sum of a's entries
        assert_eq!(r.data()[0], 6. * 10. + 21.);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::<f32>::new([2, 3, 4], (0..24).map(|v| v as f32).collect());
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], 4.0);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn narrow_concat_inverse() {
        let t = Tensor::<f32>::new([2, 5, 2], (0..20).map(|v| v as f32).collect());
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn bad_broadcast_is_an_error() {
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }
}
