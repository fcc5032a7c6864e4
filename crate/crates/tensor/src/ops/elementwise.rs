use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

// tanh through a single exp; libm's tanhf goes through expm1f and dominated profiles
fn tanh_exp<T: Scalar>(u: T) -> T {
    let e = (T::c(-2.0) * u.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let k = T::c(GELU_K);
    let half = T::c(0.5);
    half * x * (T::one() + tanh_exp(c * (x + k * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let k = T::c(GELU_K);
    let half = T::c(0.5);
    let u = c * (x + k * x * x * x);
    let th = tanh_exp(u);
    let du = c * (T::one() + T::c(3.0) * k * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

impl<T: Scalar> Var<T> {
    fn binary(
        &self,
        other: &Var<T>,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, &[bool]) -> (Option<Tensor<T>>, Option<Tensor<T>>)
            + 'static,
    ) -> Result<Var<T>> {
        let a = self.value().clone();
        let b = other.value().clone();
        let out = a.broadcast_zip(&b, f)?;
        Ok(Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                let (ga, gb) = grads(g, &a, &b, need);
                let ga = ga.map(|t| t.sum_to_shape(a.shape()).expect("grad reduce"));
                let gb = gb.map(|t| t.sum_to_shape(b.shape()).expect("grad reduce"));
                vec![ga, gb]
            }),
        ))
    }

    /// Broadcasting addition.
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, |a, b| a + b, |g, _, _, need| {
            (need[0].then(|| g.clone()), need[1].then(|| g.clone()))
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, |a, b| a - b, |g, _, _, need| {
            (need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v)))
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, |a, b| a * b, |g, a, b, need| {
            (
                need[0].then(|| g.broadcast_zip(b, |x, y| x * y).expect("broadcast")),
                need[1].then(|| g.broadcast_zip(a, |x, y| x * y).expect("broadcast")),
            )
        })
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, |a, b| a / b, |g, a, b, need| {
            let ga = need[0].then(|| g.broadcast_zip(b, |x, y| x / y).expect("broadcast"));
            let gb = need[1].then(|| {
                // -g * a / b^2
                let ab = a.broadcast_zip(b, |x, y| -x / (y * y)).expect("broadcast");
                g.broadcast_zip(&ab, |x, y| x * y).expect("broadcast")
            });
            (ga, gb)
        })
    }

    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let x = self.value().clone();
        let out = x.map(f);
        let y = out.clone();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = g.clone();
                for ((gv, &xv), &yv) in gx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *gv *= df(xv, yv);
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var<T> {
        let s = T::c(s);
        self.unary(move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<T> {
        let s = T::c(s);
        self.unary(move |v| v + s, |_, _| T::one())
    }

    pub fn square(&self) -> Var<T> {
        self.unary(|v| v * v, |x, _| T::c(2.0) * x)
    }

    pub fn sqrt(&self) -> Var<T> {
        self.unary(|v| v.sqrt(), |_, y| T::c(0.5) / y)
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        self.unary(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(|v| v.abs(), |x, _| if x >= T::zero() { T::one() } else { -T::one() })
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::c(slope);
        self.unary(
            move |v| if v > T::zero() { v } else { v * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<T> {
        self.unary(gelu_fwd, |x, _| gelu_grad(x))
    }

    pub fn silu(&self) -> Var<T> {
        self.unary(
            |v| v / (T::one() + (-v).exp()),
            |x, _| {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// Clamps values; the gradient passes only where the input is inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (T::c(lo), T::c(hi));
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_fwd(x + h) - gelu_fwd(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn broadcast_mul_grad_reduces() {
        let a = Var::leaf(Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let b = Var::leaf(Tensor::<f64>::from_f64([3], &[1., 10., 100.]), true);
        let y = a.mul(&b).unwrap().sum();
        y.backward();
        assert_eq!(b.grad().unwrap().to_f64_vec(), vec![5., 7., 9.]);
        assert_eq!(a.grad().unwrap().to_f64_vec(), vec![1., 10., 100., 1., 10., 100.]);
    }
}
