use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prompthub::checkpoint::{backbone_checkpoint, load_fusion, Checkpoint};
use prompthub::config::{Preset, TrainConfig};
use prompthub::dataset::{read_png, write_png, Dataset};
use prompthub::error::{AppError, Result};
use prompthub::eval::evaluate;
use prompthub::metrics_log::Record;
use prompthub::{export, fsutil, open_backbone, open_dataset, train};
use prompthub_core::backbone::{pretrain, BackboneConfig, PretrainConfig, PretrainEvent};
use prompthub_core::data::{PromptPair, TaskKind, TaskSpec};
use prompthub_core::fusion::FusionModule;
use prompthub_core::pipeline::infer;

#[derive(Parser)]
#[command(
    name = "prompthub",
    version,
    about = "Locality-aware multi-prompt fusion for visual in-context learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
    },
    /// Pretrain and freeze the surrogate backbone.
    PretrainBackbone {
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset root; generated from --seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the default training configuration for a task.
    Config {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the fusion module.
    Train(TrainArgs),
    /// Train with an ablation preset applied, then evaluate on the test split.
    Ablate {
        preset: String,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a fusion checkpoint on the test split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Write the full result (per-example records included) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the label of one query image.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Query image (PNG); alternatively --query-id picks a test pair.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        query_id: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the fused prompt of a test query next to the query pair.
    ExportFused {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        query_id: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render per-prompt attention heat maps of a test query.
    ExportAttn {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        query_id: u32,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides paths.out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides paths.backbone.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Overrides paths.data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// Dataset root; regenerated from the checkpoint's config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

struct Model {
    cfg: TrainConfig,
    backbone: prompthub_core::backbone::Backbone<f32>,
    fusion: FusionModule<f32>,
    data: Dataset,
}

impl ModelArgs {
    fn open(&self) -> Result<Model> {
        let ck = Checkpoint::load(&self.checkpoint)?;
        let fusion = load_fusion(&ck)?;
        let mut cfg: TrainConfig = serde_json::from_value(ck.manifest.config.clone())?;
        if self.data.is_some() {
            cfg.paths.data = self.data.clone();
        }
        let backbone = open_backbone(&self.backbone)?;
        let data = open_dataset(&cfg)?;
        Ok(Model {
            cfg,
            backbone,
            fusion,
            data,
        })
    }
}

impl Model {
    fn test_pair(&self, id: u32) -> Result<&PromptPair> {
        self.data
            .test
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| AppError::Data(format!("no test pair with id {id}")))
    }
}

fn task(s: &str) -> Result<TaskKind> {
    Ok(TaskKind::parse(s)?)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn resolve_train(args: &TrainArgs) -> Result<(TrainConfig, PathBuf)> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(p) = &args.out {
        cfg.paths.out = Some(p.clone());
    }
    if let Some(p) = &args.backbone {
        cfg.paths.backbone = Some(p.clone());
    }
    if let Some(p) = &args.data {
        cfg.paths.data = Some(p.clone());
    }
    let out = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| AppError::Config("no output directory (paths.out or --out)".into()))?;
    Ok((cfg, out))
}

fn run_training(cfg: &TrainConfig, out: &Path) -> Result<train::TrainOutcome> {
    let bb_path = cfg.paths.backbone.as_ref().ok_or_else(|| {
        AppError::Config("no backbone checkpoint (paths.backbone or --backbone)".into())
    })?;
    let backbone = open_backbone(bb_path)?;
    let data = open_dataset(cfg)?;
    let outcome = train::train(cfg, &backbone, &data.train, Some(out), &mut |r| {
        if let Record::Epoch {
            epoch,
            train_total,
            val_metric,
            best,
        } = r
        {
            eprintln!(
                "epoch {epoch:>3}  loss {train_total:.4}  val {val_metric:.4}{}",
                if *best { "  *" } else { "" }
            );
        }
    })?;
    let result = evaluate(cfg.task, &backbone, &outcome.best, &data.train, &data.test)?;
    fsutil::write_json(&out.join("eval.json"), &result)?;
    eprintln!(
        "test {} {:.4} (best epoch {})",
        result.metric, result.value, outcome.best_epoch
    );
    Ok(outcome)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            task: t,
            seed,
            out,
            train_size,
            test_size,
        } => {
            let mut spec = TaskSpec::new(task(&t)?, seed);
            spec.train_size = train_size.unwrap_or(spec.train_size);
            spec.test_size = test_size.unwrap_or(spec.test_size);
            Dataset::generate(&spec)?.write(&out)?;
            eprintln!(
                "wrote {} ({} train, {} test)",
                out.display(),
                spec.train_size,
                spec.test_size
            );
        }
        Cmd::PretrainBackbone {
            task: t,
            out,
            data,
            seed,
            dim,
            epochs,
        } => {
            let kind = task(&t)?;
            let ds = match data {
                Some(d) => Dataset::load(&d)?,
                None => Dataset::generate(&TaskSpec::new(kind, seed))?,
            };
            let cfg = BackboneConfig::for_image(ds.spec.image_size, ds.spec.patch_size, dim)?;
            let mut pcfg = PretrainConfig {
                seed,
                ..PretrainConfig::default()
            };
            pcfg.encoder_epochs = epochs.unwrap_or(pcfg.encoder_epochs);
            let (bb, report) = pretrain(&ds.train, cfg, &pcfg, &mut |e| match e {
                PretrainEvent::Quantizer { step, loss } if step % 100 == 0 => {
                    eprintln!("quantizer step {step:>5}  loss {loss:.5}")
                }
                PretrainEvent::EncoderEpoch {
                    epoch,
                    loss,
                    masked_accuracy,
                } => eprintln!(
                    "encoder epoch {epoch:>3}  loss {loss:.4}  masked acc {masked_accuracy:.3}"
                ),
                _ => {}
            })?;
            let held_out = serde_json::json!({
                "masked_token_accuracy": bb.masked_token_accuracy(&ds.train, &ds.test)?,
                "reconstruction_mse": bb.reconstruction_mse(ds.test.iter().flat_map(|p| [&p.image, &p.label]))?,
            });
            let meta = serde_json::json!({
                "task": kind,
                "pretrain": pcfg,
                "report": report,
                "held_out": held_out,
            });
            backbone_checkpoint(&bb, meta)?.save(&out)?;
            print_json(&held_out)?;
        }
        Cmd::Config { task: t, seed } => print_json(&TrainConfig::for_task(task(&t)?, seed))?,
        Cmd::Train(args) => {
            let (cfg, out) = resolve_train(&args)?;
            run_training(&cfg, &out)?;
        }
        Cmd::Ablate {
            preset,
            train: args,
        } => {
            let preset = Preset::parse(&preset)?;
            let (mut cfg, out) = resolve_train(&args)?;
            cfg.apply(preset);
            cfg.validate()?;
            run_training(&cfg, &out.join(preset.name()))?;
        }
        Cmd::Eval { model, out } => {
            let m = model.open()?;
            let r = evaluate(
                m.cfg.task,
                &m.backbone,
                &m.fusion,
                &m.data.train,
                &m.data.test,
            )?;
            if let Some(p) = out {
                fsutil::write_json(&p, &r)?;
            }
            print_json(&serde_json::json!({
                "task": r.task,
                "metric": r.metric,
                "value": r.value,
                "per_class": r.per_class,
                "wall_clock_s": r.wall_clock_s,
            }))?;
        }
        Cmd::Infer {
            model,
            image,
            query_id,
            out,
        } => {
            let m = model.open()?;
            let (query, exclude) = match (image, query_id) {
                (Some(p), None) => (read_png(&p)?, None),
                (None, Some(id)) => (m.test_pair(id)?.image.clone(), Some(id)),
                _ => {
                    return Err(AppError::Config(
                        "pass exactly one of --image and --query-id".into(),
                    ))
                }
            };
            let pred = infer(&m.backbone, &m.fusion, &m.data.train, &query, exclude)?;
            write_png(&out, &pred.label)?;
        }
        Cmd::ExportFused {
            model,
            query_id,
            out,
        } => {
            let m = model.open()?;
            let q = m.test_pair(query_id)?;
            let prompts = export::retrieve(&m.data.train, q, m.fusion.cfg.num_prompts)?;
            let e = export::fused_prompt(&m.backbone, &m.fusion, q, &prompts)?;
            export::write_fused(&e, &out)?;
            print_json(&e.sidecar)?;
        }
        Cmd::ExportAttn {
            model,
            query_id,
            out,
        } => {
            let m = model.open()?;
            let q = m.test_pair(query_id)?;
            let prompts = export::retrieve(&m.data.train, q, m.fusion.cfg.num_prompts)?;
            let e = export::attention(&m.backbone, &m.fusion, q, &prompts)?;
            export::write_attention(&e, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
