//! Training configuration and ablation presets.

use std::path::{Path, PathBuf};

use prompthub_core::data::{AugmentConfig, TaskKind, TaskSpec};
use prompthub_core::fusion::FusionConfig;
use prompthub_core::locality::LocalityConfig;
use prompthub_core::losses::LossWeights;
use prompthub_core::schedule::Schedule;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::fsutil;

/// Everything a training run depends on. The resolved value is embedded in
/// every checkpoint and metrics log it produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    /// Generator settings; used when `paths.data` is absent.
    pub dataset: TaskSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub loss: LossWeights,
    pub fusion: FusionConfig,
    pub augment: AugmentConfig,
    /// Share of the training split held out for checkpoint selection.
    pub holdout_fraction: f64,
    /// Train on a fresh random subset of this many queries per epoch
    /// instead of the whole training split.
    #[serde(default)]
    pub queries_per_epoch: Option<usize>,
    pub seed: u64,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dataset root written by `gen-data`.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub backbone: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl TrainConfig {
    pub fn for_task(task: TaskKind, seed: u64) -> Self {
        let fusion = FusionConfig {
            num_prompts: 4,
            locality: LocalityConfig::gaussian(task.default_sigma()),
            patchwise: false,
        };
        TrainConfig {
            task,
            dataset: TaskSpec::new(task, seed),
            epochs: if task == TaskKind::Colorization {
                5
            } else {
                50
            },
            batch_size: 16,
            schedule: Schedule::default(),
            loss: LossWeights::default(),
            fusion,
            augment: AugmentConfig {
                seed,
                ..AugmentConfig::default()
            },
            holdout_fraction: 0.1,
            queries_per_epoch: None,
            seed,
            paths: Paths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AppError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!(
                "holdout_fraction must lie in [0,1), got {}",
                self.holdout_fraction
            ));
        }
        if self.queries_per_epoch == Some(0) {
            return bad("queries_per_epoch must be positive when set".into());
        }
        if self.dataset.kind != self.task {
            return bad(format!(
                "dataset.kind {} disagrees with task {}",
                self.dataset.kind.name(),
                self.task.name()
            ));
        }
        self.dataset.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        self.fusion.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, preset: Preset) {
        match preset {
            Preset::Full => {}
            Preset::NoLu => self.loss.gamma = 0.0,
            Preset::NoLs => self.loss.lambda = 0.0,
            Preset::NoLp => self.loss.prediction = 0.0,
            Preset::Global => {
                self.fusion.locality.sigma = GLOBAL_SIGMA;
                self.fusion.locality.adaptive = false;
            }
            Preset::NoAug => self.augment = AugmentConfig::disabled(self.augment.seed),
            Preset::Patchwise => self.fusion.patchwise = true,
        }
    }
}

/// σ of the flat-prior "global fusion" ablation.
pub const GLOBAL_SIGMA: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    NoLu,
    NoLs,
    NoLp,
    Global,
    NoAug,
    Patchwise,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Full,
        Preset::NoLu,
        Preset::NoLs,
        Preset::NoLp,
        Preset::Global,
        Preset::NoAug,
        Preset::Patchwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::NoLu => "no_lu",
            Preset::NoLs => "no_ls",
            Preset::NoLp => "no_lp",
            Preset::Global => "global",
            Preset::NoAug => "no_aug",
            Preset::Patchwise => "patchwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
                AppError::Config(format!(
                    "unknown preset '{s}' (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}
