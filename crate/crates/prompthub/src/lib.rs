//! Training harness, file formats and command-line tooling around
//! `prompthub-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod export;
pub mod fsutil;
pub mod metrics_log;
pub mod train;

use std::path::Path;

use prompthub_core::backbone::Backbone;

pub use error::{AppError, Result};

/// Loads a backbone checkpoint; a missing file is a configuration error.
pub fn open_backbone(path: &Path) -> Result<Backbone<f32>> {
    if !path.exists() {
        return Err(AppError::Config(format!(
            "backbone checkpoint {} not found",
            path.display()
        )));
    }
    checkpoint::load_backbone(&checkpoint::Checkpoint::load(path)?)
}

/// Dataset from `paths.data` when set, otherwise generated from the spec.
pub fn open_dataset(cfg: &config::TrainConfig) -> Result<dataset::Dataset> {
    match &cfg.paths.data {
        Some(dir) => {
            let ds = dataset::Dataset::load(dir)?;
            if ds.spec.kind != cfg.task {
                return Err(AppError::Config(format!(
                    "{} holds a {} dataset, config asks for {}",
                    dir.display(),
                    ds.spec.kind.name(),
                    cfg.task.name()
                )));
            }
            Ok(ds)
        }
        None => dataset::Dataset::generate(&cfg.dataset),
    }
}
