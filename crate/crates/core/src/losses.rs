//! Training objectives over canvas logits.
//!
//! Every loss is an exact mean over grid cells. Logit grids are
//! `[cells × N_c]` tensors; token grids are 0-based codebook indices.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{cosine_similarity, cross_entropy_from_logits, Tape, Tensor, Var, COSINE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the label prediction term. Only the "without prediction
    /// loss" ablation sets this to anything but 1.
    #[serde(default = "one")]
    pub prediction: f64,
    pub lambda: f64,
    pub gamma: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            prediction: 1.0,
            lambda: 0.5,
            gamma: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prediction", self.prediction),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss.{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_s: f64,
    pub l_u: f64,
    pub total: f64,
}

impl LossReport {
    pub fn add(&mut self, o: &LossReport) {
        self.l_p += o.l_p;
        self.l_s += o.l_s;
        self.l_u += o.l_u;
        self.total += o.total;
    }

    pub fn scaled(&self, c: f64) -> LossReport {
        LossReport {
            l_p: self.l_p * c,
            l_s: self.l_s * c,
            l_u: self.l_u * c,
            total: self.total * c,
        }
    }
}

fn mean_ce<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    if logits.rows() != targets.len() {
        return Err(Error::dim(
            "cross_entropy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        total += cross_entropy_from_logits(logits.row(r), t)?;
    }
    Ok(total / T::of(targets.len() as f64))
}

fn mean_cos<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::dim("cosine", a.shape(), b.shape()));
    }
    let mut total = T::zero();
    for r in 0..a.rows() {
        total += cosine_similarity(a.row(r), b.row(r), T::of(COSINE_EPS))?;
    }
    Ok(total / T::of(a.rows() as f64))
}

/// Mean cross-entropy of the answer quadrant against the query label tokens.
pub fn label_prediction_loss<T: Real>(
    masked_logits: &Tensor<T>,
    target_tokens: &[usize],
) -> Result<T> {
    mean_ce(masked_logits, target_tokens)
}

/// Cross-entropy of the fused image and label streams against the query
/// pair's own tokens, summed over the two streams.
pub fn semantic_integrity_loss<T: Real>(
    fused_x_logits: &Tensor<T>,
    fused_y_logits: &Tensor<T>,
    target_x: &[usize],
    target_y: &[usize],
) -> Result<T> {
    if fused_x_logits.shape() != fused_y_logits.shape() {
        return Err(Error::dim(
            "semantic_integrity",
            fused_x_logits.shape(),
            fused_y_logits.shape(),
        ));
    }
    Ok(mean_ce(fused_x_logits, target_x)? + mean_ce(fused_y_logits, target_y)?)
}

/// `-(mean cos(fused_x, query_x) + mean cos(fused_y, masked))`, in `[-2, 2]`.
pub fn utilization_loss<T: Real>(
    fused_x: &Tensor<T>,
    fused_y: &Tensor<T>,
    query_x: &Tensor<T>,
    masked: &Tensor<T>,
) -> Result<T> {
    Ok(-(mean_cos(fused_x, query_x)? + mean_cos(fused_y, masked)?))
}

/// Weighted sum of the three component losses.
pub fn total_loss(l_p: f64, l_s: f64, l_u: f64, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    Ok(LossReport {
        l_p,
        l_s,
        l_u,
        total: w.prediction * l_p + w.lambda * l_s + w.gamma * l_u,
    })
}

/// Canvas logit blocks, each `[cells × N_c]`.
#[derive(Clone, Copy, Debug)]
pub struct CanvasLogits {
    pub fused_x: Var,
    pub fused_y: Var,
    pub query_x: Var,
    pub masked: Var,
}

/// Discrete targets of one training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossTargets {
    /// Query image tokens at the prompt-image position.
    pub prompt_x: alloc::vec::Vec<usize>,
    /// Query label tokens at the prompt-label position.
    pub prompt_y: alloc::vec::Vec<usize>,
    /// Query label tokens at the answer position.
    pub answer: alloc::vec::Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_p: Var,
    pub l_s: Var,
    pub l_u: Var,
    pub total: Var,
}

/// The combined objective recorded on `tape`.
pub fn objective_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: CanvasLogits,
    targets: &LossTargets,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    let l_p = tape.cross_entropy_rows(logits.masked, &targets.answer)?;
    let sx = tape.cross_entropy_rows(logits.fused_x, &targets.prompt_x)?;
    let sy = tape.cross_entropy_rows(logits.fused_y, &targets.prompt_y)?;
    let l_s = tape.add(sx, sy)?;
    let eps = T::of(COSINE_EPS);
    let cx = tape.cosine_rows(logits.fused_x, logits.query_x, eps)?;
    let cy = tape.cosine_rows(logits.fused_y, logits.masked, eps)?;
    let cx = tape.mean(cx)?;
    let cy = tape.mean(cy)?;
    let u = tape.add(cx, cy)?;
    let l_u = tape.scale(u, -T::one())?;
    let p = tape.scale(l_p, T::of(w.prediction))?;
    let s = tape.scale(l_s, T::of(w.lambda))?;
    let g = tape.scale(l_u, T::of(w.gamma))?;
    let ps = tape.add(p, s)?;
    let total = tape.add(ps, g)?;
    Ok(LossVars {
        l_p,
        l_s,
        l_u,
        total,
    })
}

impl LossVars {
    pub fn report<T: Real>(&self, tape: &Tape<T>) -> LossReport {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        LossReport {
            l_p: v(self.l_p),
            l_s: v(self.l_s),
            l_u: v(self.l_u),
            total: v(self.total),
        }
    }
}
