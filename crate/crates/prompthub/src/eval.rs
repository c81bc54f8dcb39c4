//! Test-set evaluation.

use std::time::Instant;

use prompthub_core::backbone::Backbone;
use prompthub_core::data::{PromptDatabase, PromptPair, TaskKind};
use prompthub_core::fusion::FusionModule;
use prompthub_core::metrics::{mse, ClassIou, MASK_THRESHOLD};
use prompthub_core::pipeline::infer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: u32,
    pub class_tag: u32,
    /// IoU for mask tasks, MSE for colorization.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    /// `"miou"` or `"mse"`.
    pub metric: String,
    pub value: f64,
    /// Per-class IoU; empty for colorization.
    pub per_class: Vec<(u32, f64)>,
    pub records: Vec<ExampleRecord>,
    pub wall_clock_s: f64,
}

impl EvalResult {
    /// Larger is better for both metrics.
    pub fn score(&self) -> f64 {
        if self.task.uses_masks() {
            self.value
        } else {
            -self.value
        }
    }
}

/// Scores every query with prompts retrieved from `db`. A query whose id
/// appears in `db` never retrieves itself.
pub fn evaluate(
    task: TaskKind,
    backbone: &Backbone<f32>,
    fusion: &FusionModule<f32>,
    db: &PromptDatabase,
    queries: &[PromptPair],
) -> Result<EvalResult> {
    if queries.is_empty() {
        return Err(AppError::Config(
            "evaluation needs at least one query".into(),
        ));
    }
    let start = Instant::now();
    let preds: Vec<_> = queries
        .par_iter()
        .map(|q| infer(backbone, fusion, db, &q.image, Some(q.id)).map(|p| p.label))
        .collect::<std::result::Result<_, _>>()?;
    let mut records = Vec::with_capacity(queries.len());
    let mut classes = ClassIou::new();
    let mut total = 0.0;
    for (q, pred) in queries.iter().zip(&preds) {
        let score = if task.uses_masks() {
            let (p, g) = (
                pred.binarize(MASK_THRESHOLD),
                q.label.binarize(MASK_THRESHOLD),
            );
            classes.add(q.class_tag, &p, &g)?
        } else {
            let e = mse(pred, &q.label)?;
            total += e;
            e
        };
        records.push(ExampleRecord {
            id: q.id,
            class_tag: q.class_tag,
            score,
        });
    }
    let (metric, value, per_class) = if task.uses_masks() {
        ("miou", classes.mean(), classes.per_class())
    } else {
        ("mse", total / queries.len() as f64, Vec::new())
    };
    Ok(EvalResult {
        task,
        metric: metric.into(),
        value,
        per_class,
        records,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}
