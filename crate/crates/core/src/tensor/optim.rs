use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// `p ← p − lr·grad(p)` for every parameter, then clears the gradients.
///
/// Every parameter must carry a gradient; a missing one is a contract error
/// and leaves all parameters untouched.
pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
    if let Some(pos) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!(
            "sgd_step: parameter {pos} (shape {:?}) has no gradient",
            params[pos].shape()
        )));
    }
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        for (w, gv) in p.data.iter_mut().zip(g) {
            *w -= lr * gv;
        }
        if !kernels_finite(&p.data) {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    Ok(())
}

fn kernels_finite<T: Real>(x: &[T]) -> bool {
    super::kernels::all_finite(x)
}

/// Adam with bias correction. Used by the backbone pretraining recipe only;
/// fusion training uses [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Adam {
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Parameters without a gradient are skipped (their moments still decay
    /// lazily on the next touch).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(
                "Adam: parameter list changed between steps".into(),
            ));
        }
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad.take() else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}
