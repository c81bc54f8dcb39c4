//! Fusion training: SGD with warm-restart cosine annealing over a frozen
//! backbone.

use std::path::Path;

use prompthub_core::backbone::Backbone;
use prompthub_core::data::{augment, Mode, PromptDatabase, PromptPair};
use prompthub_core::fusion::FusionModule;
use prompthub_core::losses::{LossReport, LossTargets};
use prompthub_core::pipeline::{example_gradients, loss_targets};
use prompthub_core::tensor::sgd_step;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{fusion_checkpoint, hex, Checkpoint};
use crate::config::TrainConfig;
use crate::error::{AppError, Result};
use crate::eval::{evaluate, EvalResult};
use crate::metrics_log::{MetricsLog, Record};

/// SHA-256 over every backbone tensor, in parameter order.
pub fn backbone_digest(bb: &Backbone<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in bb.named_tensors() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Deterministic split of database positions into (train, holdout).
pub fn split_indices(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_401d);
    idx.shuffle(&mut rng);
    let n_hold = ((len as f64 * fraction).round() as usize).min(len.saturating_sub(1));
    let mut hold = idx.split_off(len - n_hold);
    idx.sort_unstable();
    hold.sort_unstable();
    (idx, hold)
}

pub struct TrainOutcome {
    pub module: FusionModule<f32>,
    pub best: FusionModule<f32>,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub best_epoch: usize,
    /// Validation result of the best epoch, when a holdout exists.
    pub best_validation: Option<EvalResult>,
    pub log: MetricsLog,
    pub backbone_digest: String,
}

/// Everything the inner loop reads, prepared once.
struct Prepared {
    train: Vec<usize>,
    holdout: Vec<PromptPair>,
    neighbours: Vec<Vec<usize>>,
    targets: Vec<Option<LossTargets>>,
}

fn prepare(cfg: &TrainConfig, bb: &Backbone<f32>, db: &PromptDatabase) -> Result<Prepared> {
    let n = cfg.fusion.num_prompts;
    if n >= db.len() {
        return Err(AppError::Config(format!(
            "num_prompts {n} needs a database of more than {n} pairs (have {})",
            db.len()
        )));
    }
    let (train, hold) = split_indices(db.len(), cfg.holdout_fraction, cfg.seed);
    let neighbours = db
        .pairs()
        .par_iter()
        .map(|p| {
            db.retrieve_ranked(&p.image, n, Some(p.id))
                .map(|r| r.into_iter().map(|r| r.index).collect())
        })
        .collect::<std::result::Result<Vec<Vec<usize>>, _>>()?;
    let mut targets: Vec<Option<LossTargets>> = vec![None; db.len()];
    let computed = train
        .par_iter()
        .map(|&i| loss_targets(bb, db.get(i)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for (&i, t) in train.iter().zip(computed) {
        targets[i] = Some(t);
    }
    Ok(Prepared {
        train,
        holdout: hold.iter().map(|&i| db.get(i).clone()).collect(),
        neighbours,
        targets,
    })
}

fn finite(r: &LossReport) -> bool {
    [r.l_p, r.l_s, r.l_u, r.total].iter().all(|v| v.is_finite())
}

// holdout score, epoch, module, its evaluation, its checkpoint
type Best = (
    f64,
    usize,
    FusionModule<f32>,
    Option<EvalResult>,
    Checkpoint,
);

/// Trains a fusion module on the queries of `db` (minus the holdout) and
/// returns the final and best-on-holdout modules with their checkpoints.
/// With `out_dir`, checkpoints and the log are also written there.
pub fn train(
    cfg: &TrainConfig,
    backbone: &Backbone<f32>,
    db: &PromptDatabase,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&Record),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(AppError::Config(
            "fusion training needs a frozen backbone".into(),
        ));
    }
    let digest = backbone_digest(backbone);
    let grid = (backbone.cfg.grid_h, backbone.cfg.grid_w);
    let mut module = FusionModule::<f32>::new(cfg.fusion, grid, backbone.cfg.dim, cfg.seed)?;
    let prep = prepare(cfg, backbone, db)?;
    let resolved = serde_json::to_value(cfg)?;
    let mut log = MetricsLog::new(
        out_dir.map(|d| d.join("metrics.ndjson")).as_deref(),
        resolved.clone(),
    )?;

    let per_epoch = cfg
        .queries_per_epoch
        .unwrap_or(prep.train.len())
        .min(prep.train.len());
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let meta = |epoch: usize, step: usize, val: Option<f64>| json!({ "epoch": epoch, "step": step, "val_metric": val, "backbone_sha256": digest });
    let mut best: Option<Best> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = prep.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order.truncate(per_epoch);

        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&qi| {
                    let q = db.get(qi);
                    let top: Vec<&PromptPair> =
                        prep.neighbours[qi].iter().map(|&j| db.get(j)).collect();
                    let key = (epoch * db.len() + qi) as u64;
                    let prompts = augment(&top, q, db, &cfg.augment, Mode::Train, key)?;
                    let targets = prep.targets[qi]
                        .as_ref()
                        .expect("targets cached for training queries");
                    example_gradients(backbone, &module, &q.image, &prompts, targets, &cfg.loss)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;

            // merged in batch order, so the sum is independent of scheduling
            let inv = 1.0 / batch.len() as f64;
            let mut report = LossReport::default();
            let mut grads: Vec<Vec<f32>> = Vec::new();
            for (r, g) in results {
                report.add(&r);
                if grads.is_empty() {
                    grads = g;
                } else {
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let report = report.scaled(inv);
            let grad_ok = grads.iter().flatten().all(|v| v.is_finite());
            if !finite(&report) || !grad_ok {
                log.flush()?;
                return Err(AppError::Numeric {
                    step,
                    detail: format!("non-finite loss or gradient ({report:?})"),
                });
            }
            let lr = cfg.schedule.lr_at(step, steps_per_epoch);
            let mut params = module.params_mut();
            for (p, g) in params.iter_mut().zip(&grads) {
                let scaled: Vec<f32> = g.iter().map(|v| (*v as f64 * inv) as f32).collect();
                p.accumulate_grad(&scaled)?;
            }
            sgd_step(&mut params, lr as f32).map_err(|e| AppError::Numeric {
                step,
                detail: e.to_string(),
            })?;
            let rec = Record::Step {
                step,
                epoch,
                l_p: report.l_p,
                l_s: report.l_s,
                l_u: report.l_u,
                total: report.total,
                lr,
            };
            progress(&rec);
            log.push(rec)?;
            epoch_total += report.total;
            step += 1;
        }

        let val = if prep.holdout.is_empty() {
            None
        } else {
            Some(evaluate(cfg.task, backbone, &module, db, &prep.holdout)?)
        };
        let score = val.as_ref().map_or(f64::NEG_INFINITY, EvalResult::score);
        let improved = match &best {
            None => true,
            // without a holdout the latest epoch wins
            Some((s, ..)) => val.is_none() || score > *s,
        };
        if improved {
            let ck = fusion_checkpoint(
                &module,
                resolved.clone(),
                meta(epoch, step, val.as_ref().map(|v| v.value)),
            )?;
            if let Some(dir) = out_dir {
                ck.save(&dir.join("best.ckpt"))?;
            }
            best = Some((score, epoch, module.clone(), val.clone(), ck));
        }
        let rec = Record::Epoch {
            epoch,
            train_total: epoch_total / steps_per_epoch as f64,
            val_metric: val.as_ref().map_or(f64::NAN, |v| v.value),
            best: improved,
        };
        progress(&rec);
        log.push(rec)?;
        log.flush()?;
    }

    if backbone_digest(backbone) != digest {
        return Err(AppError::Numeric {
            step,
            detail: "backbone weights changed during fusion training".into(),
        });
    }
    let (_, best_epoch, best_module, best_val, best_checkpoint) = best.expect("at least one epoch");
    let final_checkpoint = fusion_checkpoint(&module, resolved, meta(cfg.epochs - 1, step, None))?;
    if let Some(dir) = out_dir {
        final_checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        module,
        best: best_module,
        final_checkpoint,
        best_checkpoint,
        best_epoch,
        best_validation: best_val,
        log,
        backbone_digest: digest,
    })
}
