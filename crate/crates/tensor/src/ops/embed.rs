use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

impl<T: Scalar> Var<T> {
    /// Gathers rows of a `[V, D]` table. Output shape is `prefix ++ [D]`.
    pub fn gather_rows(&self, indices: &[usize], prefix: &[usize]) -> Result<Var<T>> {
        if self.value().rank() != 2 {
            return Err(TensorError::Shape(format!("gather_rows expects [V, D], got {:?}", self.shape())));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if prefix.iter().product::<usize>() != indices.len() {
            return Err(TensorError::Shape(format!(
                "gather_rows prefix {prefix:?} does not hold {} indices",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(TensorError::Shape(format!("row index {bad} out of range for {v} rows")));
        }
        let table = self.value().data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&table[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let indices = indices.to_vec();
        Ok(Var::from_op(
            Tensor::new(shape, out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gt = vec![T::zero(); v * d];
                for (row, &i) in g.data().chunks(d).zip(&indices) {
                    for (a, b) in gt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *a += *b;
                    }
                }
                vec![Some(Tensor::new([v, d], gt))]
            }),
        ))
    }
}
