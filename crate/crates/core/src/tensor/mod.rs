//! Dense tensors, a reverse-mode tape and first-order optimizers.

pub mod kernels;
mod optim;
mod tape;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

pub use optim::{sgd_step, Adam};
pub use tape::{Grads, Tape, Var};

/// Dense row-major array. The last axis is the "column" axis for every
/// row-wise operation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(&[1], vec![value]).expect("scalar")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect()).expect("from_fn: invalid shape")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(
            &[n, n],
            |i| if i / n == i % n { T::one() } else { T::zero() },
        )
    }

    /// Glorot-uniform initialization: `U[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<R: Rng + ?Sized>(
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::from_fn(shape, |_| T::of(rng.random_range(-s..s)))
    }

    /// Uniform `[-scale, scale]` entries.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(-scale..scale)))
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first touch.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-type conversion; gradient state is dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        kernels::all_finite(&self.data)
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Row `r` of the `rows × cols` view.
    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(&self.data, &other.data, m, k, n, &mut out);
        Tensor::new(&[m, n], out)?.check_finite("matmul")
    }

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let cols = self.cols();
        let mut out = vec![T::zero(); self.data.len()];
        kernels::softmax_rows(&self.data, cols, &mut out);
        Tensor::new(&self.shape, out)?.check_finite("softmax")
    }
}

/// `-log softmax(logits)[target]` for a single logit vector. `target` is a
/// zero-based class index.
pub fn cross_entropy_from_logits<T: Real>(logits: &[T], target: usize) -> Result<T> {
    if logits.is_empty() {
        return Err(Error::dim("cross_entropy", &[0], &[1]));
    }
    if target >= logits.len() {
        return Err(Error::Index {
            op: "cross_entropy",
            index: target,
            len: logits.len(),
        });
    }
    let loss = kernels::log_sum_exp(logits) - logits[target];
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok(loss.max(T::zero()))
}

/// `⟨a,b⟩ / (max(‖a‖,eps)·max(‖b‖,eps))`.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T], eps: T) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let na = kernels::dot(a, a).sqrt().max(eps);
    let nb = kernels::dot(b, b).sqrt().max(eps);
    Ok(kernels::dot(a, b) / (na * nb))
}

/// Default epsilon for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let b = t(&[2, 1], &[5., 6.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17., 39.]);
        let z = Tensor::<f64>::zeros(&[3, 4]);
        let any = Tensor::from_fn(&[4, 2], |i| i as f64 - 3.3);
        let out = z.matmul(&any).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let u = t(&[4], &[0.; 4]).softmax_lastdim().unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let s = t(&[2], &[2f64.ln(), 0.]).softmax_lastdim().unwrap();
        assert!((s.data()[0] - 2. / 3.).abs() < 1e-12);
        assert!((s.data()[1] - 1. / 3.).abs() < 1e-12);
        let big = Tensor::<f32>::new(&[2], vec![1000., 0.])
            .unwrap()
            .softmax_lastdim()
            .unwrap();
        assert!((big.data()[0] - 1.).abs() < 1e-6 && big.data()[1] < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut spike = vec![0f64; 8];
        spike[3] = 30.;
        assert!(cross_entropy_from_logits(&spike, 3).unwrap() < 1e-10);
        let uniform = vec![0f64; 32];
        let l = cross_entropy_from_logits(&uniform, 7).unwrap();
        assert!((l - 3.465736).abs() < 1e-6);
        assert!(matches!(
            cross_entropy_from_logits(&uniform, 32),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f64, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v, 1e-8).unwrap() - 1.).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1f64, 0.], &[0., 1.], 1e-8).unwrap(), 0.);
        let c = cosine_similarity(&[1f64, 2., 3.], &[-1., -2., -3.], 1e-8).unwrap();
        assert!((c + 1.).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0f64, 0.], &[1., 1.], 1e-8).unwrap(), 0.);
    }

    #[test]
    fn shape_buffer_invariant() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.; 5]).is_err());
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn non_finite_fails_fast() {
        let a = Tensor::<f32>::new(&[1, 1], vec![f32::MAX]).unwrap();
        let b = Tensor::<f32>::new(&[1, 1], vec![10.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap_err(), Error::NonFinite { op: "matmul" });
    }
}
