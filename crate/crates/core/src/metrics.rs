//! Segmentation IoU and colorization MSE.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

/// Luminance threshold for turning decoded masks into binary masks.
pub const MASK_THRESHOLD: f32 = 0.5;

/// `(|pred ∩ gt|, |pred ∪ gt|)`.
pub fn intersection_union(pred: &[bool], gt: &[bool]) -> Result<(u64, u64)> {
    if pred.len() != gt.len() {
        return Err(Error::dim("iou", &[pred.len()], &[gt.len()]));
    }
    let (mut i, mut u) = (0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        i += u64::from(p && g);
        u += u64::from(p || g);
    }
    Ok((i, u))
}

/// IoU of two masks; two empty masks agree perfectly.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Per-pixel mean squared error over all channels.
pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::dim(
            "mse",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    let s: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / pred.data.len() as f64)
}

/// Accumulates intersections and unions per class; a class's IoU is
/// `Σ inter / Σ union` over its examples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    totals: BTreeMap<u32, (u64, u64)>,
}

impl ClassIou {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class_tag: u32, pred: &[bool], gt: &[bool]) -> Result<f64> {
        let (i, u) = intersection_union(pred, gt)?;
        let e = self.totals.entry(class_tag).or_default();
        e.0 += i;
        e.1 += u;
        Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
    }

    pub fn per_class(&self) -> Vec<(u32, f64)> {
        self.totals
            .iter()
            .map(|(&c, &(i, u))| (c, if u == 0 { 1.0 } else { i as f64 / u as f64 }))
            .collect()
    }

    /// Arithmetic mean of the per-class IoUs (0 when empty).
    pub fn mean(&self) -> f64 {
        let pc = self.per_class();
        if pc.is_empty() {
            return 0.0;
        }
        pc.iter().map(|(_, v)| v).sum::<f64>() / pc.len() as f64
    }
}
