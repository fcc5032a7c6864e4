use crate::autograd::Var;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Batched `op(a) @ op(b)` on rank-3 tensors.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) {
        return Err(TensorError::Shape(format!(
            "bmm expects [B,m,k] x [B,k,n], got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch = a.dim(0);
    let (m, k) = if ta { (a.dim(2), a.dim(1)) } else { (a.dim(1), a.dim(2)) };
    let (k2, n) = if tb { (b.dim(2), b.dim(1)) } else { (b.dim(1), b.dim(2)) };
    if k != k2 {
        return Err(TensorError::Shape(format!(
            "bmm inner dims differ: {:?} x {:?} (ta={ta}, tb={tb})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); batch * m * n];
    let (sa, sb) = (a.dim(1) * a.dim(2), b.dim(1) * b.dim(2));
    for i in 0..batch {
        gemm(
            ta,
            tb,
            m,
            k,
            n,
            T::one(),
            &a.data()[i * sa..(i + 1) * sa],
            &b.data()[i * sb..(i + 1) * sb],
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Ok(Tensor::new([batch, m, n], out))
}

/// `x[.., in] @ w[out, in]^T + bias[out]` on tensor values.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let inp = *x.shape().last().unwrap_or(&0);
    if w.rank() != 2 || w.dim(1) != inp {
        return Err(TensorError::Shape(format!(
            "linear: input {:?} incompatible with weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let outp = w.dim(0);
    let rows = x.numel() / inp.max(1);
    let mut out = vec![T::zero(); rows * outp];
    if let Some(b) = bias {
        for r in 0..rows {
            out[r * outp..(r + 1) * outp].copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(false, true, rows, inp, outp, T::one(), x.data(), w.data(), beta, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = outp;
    Ok(Tensor::new(shape, out))
}

impl<T: Scalar> Var<T> {
    /// Batched matrix product with optional transposition of either operand.
    pub fn bmm(&self, other: &Var<T>, ta: bool, tb: bool) -> Result<Var<T>> {
        let a = self.value().clone();
        let b = other.value().clone();
        let out = bmm(&a, &b, ta, tb)?;
        Ok(Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    if ta {
                        bmm(&b, g, tb, true)
                    } else {
                        bmm(g, &b, false, !tb)
                    }
                    .expect("bmm grad")
                });
                let gb = need[1].then(|| {
                    if tb {
                        bmm(g, &a, true, ta)
                    } else {
                        bmm(&a, g, !ta, false)
                    }
                    .expect("bmm grad")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map over the last dimension with weight `[out, in]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let x = self.value().clone();
        let w = weight.value().clone();
        let out = linear_forward(&x, &w, bias.map(|b| b.value()))?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Var::from_op(
            out,
            parents,
            Box::new(move |g, need| {
                let inp = w.dim(1);
                let outp = w.dim(0);
                let rows = x.numel() / inp.max(1);
                let gx = need[0].then(|| {
                    let mut d = vec![T::zero(); rows * inp];
                    gemm(false, false, rows, outp, inp, T::one(), g.data(), w.data(), T::zero(), &mut d);
                    Tensor::new(x.shape().to_vec(), d)
                });
                let gw = need[1].then(|| {
                    let mut d = vec![T::zero(); outp * inp];
                    gemm(true, false, outp, rows, inp, T::one(), g.data(), x.data(), T::zero(), &mut d);
                    Tensor::new([outp, inp], d)
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(need[2].then(|| {
                        let mut d = vec![T::zero(); outp];
                        for row in g.data().chunks(outp) {
                            for (a, b) in d.iter_mut().zip(row) {
                                *a += *b;
                            }
                        }
                        Tensor::new([outp], d)
                    }));
                }
                res
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bmm_transpose_flags() {
        let a = Tensor::<f64>::from_f64([1, 2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_f64([1, 2, 3], &[1., 0., 1., 0., 1., 0.]);
        // a @ b^T: [[1+3, 2], [4+6, 5]]
        let c = bmm(&a, &b, false, true).unwrap();
        assert_eq!(c.to_f64_vec(), vec![4., 2., 10., 5.]);
        // a^T @ b: 3x3
        let d = bmm(&a, &b, true, false).unwrap();
        assert_eq!(d.shape(), &[1, 3, 3]);
        assert_eq!(d.to_f64_vec()[0], 1.0);
        assert_eq!(d.to_f64_vec()[1], 4.0);
    }
}
