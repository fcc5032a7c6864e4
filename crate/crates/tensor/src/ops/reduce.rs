use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

impl<T: Scalar> Var<T> {
    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(self.value().sum());
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `dims`, keeping them as size-1 axes.
    pub fn sum_dims(&self, dims: &[usize]) -> Result<Var<T>> {
        let in_shape = self.shape().to_vec();
        let mut out_shape = in_shape.clone();
        for &d in dims {
            if d >= in_shape.len() {
                return Err(TensorError::Shape(format!(
                    "reduction dim {d} out of range for {in_shape:?}"
                )));
            }
            out_shape[d] = 1;
        }
        let out = self.value().sum_to_shape(&out_shape)?;
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.broadcast_to(&in_shape).expect("broadcast"))]),
        ))
    }

    /// Mean over `dims`, keeping them as size-1 axes.
    pub fn mean_dims(&self, dims: &[usize]) -> Result<Var<T>> {
        let count: usize = dims.iter().map(|&d| self.shape()[d]).product();
        Ok(self.sum_dims(dims)?.scale(1.0 / count as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_dims_gradient_is_uniform() {
        let x = Var::leaf(Tensor::<f64>::from_f64([2, 2], &[1., 2., 3., 4.]), true);
        let m = x.mean_dims(&[1]).unwrap();
        assert_eq!(m.value().to_f64_vec(), vec![1.5, 3.5]);
        m.sum().backward();
        assert_eq!(x.grad().unwrap().to_f64_vec(), vec![0.5; 4]);
    }
}
