//! Visual exports: decoded fused prompts and per-prompt attention heat maps.

use std::path::Path;

use prompthub_core::backbone::Backbone;
use prompthub_core::canvas::Quadrant;
use prompthub_core::data::{Image, PromptDatabase, PromptPair};
use prompthub_core::fusion::{AttentionRecord, FusionModule};
use prompthub_core::metrics::{iou, MASK_THRESHOLD};
use prompthub_core::pipeline::{predict, Prediction};
use serde::{Deserialize, Serialize};

use crate::dataset::write_png;
use crate::error::Result;
use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedSidecar {
    pub query_id: u32,
    pub prompt_ids: Vec<u32>,
    /// IoU between the decoded fused label and the query label.
    pub fused_label_iou: f64,
    pub sigma: f64,
    /// Left to right.
    pub panels: [String; 4],
}

pub struct FusedExport {
    pub composite: Image,
    pub fused_image: Image,
    pub fused_label: Image,
    pub sidecar: FusedSidecar,
}

pub fn retrieve<'a>(
    db: &'a PromptDatabase,
    query: &PromptPair,
    n: usize,
) -> Result<Vec<&'a PromptPair>> {
    let ranked = db.retrieve_ranked(&query.image, n, Some(query.id))?;
    Ok(ranked.iter().map(|r| db.get(r.index)).collect())
}

/// Decodes the fused prompt pair and lays it out next to the query pair.
pub fn fused_prompt(
    backbone: &Backbone<f32>,
    fusion: &FusionModule<f32>,
    query: &PromptPair,
    prompts: &[&PromptPair],
) -> Result<FusedExport> {
    let pred: Prediction<f32> = predict(backbone, fusion, &query.image, prompts)?;
    let fused_image = pred.decode_quadrant(backbone, Quadrant::PromptImage)?;
    let fused_label = pred.decode_quadrant(backbone, Quadrant::PromptLabel)?;
    let composite = Image::hconcat(&[&fused_image, &fused_label, &query.image, &query.label])?;
    let fused_label_iou = iou(
        &fused_label.binarize(MASK_THRESHOLD),
        &query.label.binarize(MASK_THRESHOLD),
    )?;
    Ok(FusedExport {
        composite,
        fused_image,
        fused_label,
        sidecar: FusedSidecar {
            query_id: query.id,
            prompt_ids: prompts.iter().map(|p| p.id).collect(),
            fused_label_iou,
            sigma: pred.fusion.sigma as f64,
            panels: ["fused_image", "fused_label", "query_image", "query_label"].map(String::from),
        },
    })
}

/// Writes `<stem>.png` and `<stem>.json` next to each other.
pub fn write_fused(export: &FusedExport, png_path: &Path) -> Result<()> {
    write_png(png_path, &export.composite)?;
    fsutil::write_json(&png_path.with_extension("json"), &export.sidecar)
}

/// Min-max normalization to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub query_id: u32,
    pub prompt_ids: Vec<u32>,
    /// Per prompt, attention each key cell receives summed over query
    /// cells, before normalization.
    pub raw_heat: Vec<Vec<f64>>,
    /// Share of the attention mass per prompt.
    pub prompt_mass: Vec<f64>,
}

pub struct AttentionExport {
    /// One heat image per prompt, at sub-image resolution.
    pub heat: Vec<Image>,
    pub normalized: Vec<Vec<f64>>,
    pub sidecar: AttentionSidecar,
}

pub fn attention_maps(
    record: &AttentionRecord<f32>,
    patch: usize,
    query: &PromptPair,
    prompts: &[&PromptPair],
) -> Result<AttentionExport> {
    let (gh, gw) = record.grid;
    let mut raw = Vec::with_capacity(prompts.len());
    let mut normalized = Vec::with_capacity(prompts.len());
    let mut heat = Vec::with_capacity(prompts.len());
    for i in 0..record.num_prompts {
        let h: Vec<f64> = record.prompt_heat(i)?.iter().map(|&v| v as f64).collect();
        let n = min_max(&h);
        let px: Vec<f32> = n.iter().map(|&v| v as f32).collect();
        heat.push(Image::from_heat(&px, gh, gw, patch)?);
        raw.push(h);
        normalized.push(n);
    }
    Ok(AttentionExport {
        heat,
        normalized,
        sidecar: AttentionSidecar {
            query_id: query.id,
            prompt_ids: prompts.iter().map(|p| p.id).collect(),
            raw_heat: raw,
            prompt_mass: record.prompt_mass().iter().map(|&v| v as f64).collect(),
        },
    })
}

pub fn attention(
    backbone: &Backbone<f32>,
    fusion: &FusionModule<f32>,
    query: &PromptPair,
    prompts: &[&PromptPair],
) -> Result<AttentionExport> {
    let pred = predict(backbone, fusion, &query.image, prompts)?;
    attention_maps(
        &pred.fusion.attention,
        backbone.cfg.patch_size,
        query,
        prompts,
    )
}

/// Writes `attn_<i>.png` per prompt plus `attention.json` into `dir`.
pub fn write_attention(export: &AttentionExport, dir: &Path) -> Result<()> {
    for (i, im) in export.heat.iter().enumerate() {
        write_png(&dir.join(format!("attn_{i}.png")), im)?;
    }
    fsutil::write_json(&dir.join("attention.json"), &export.sidecar)
}
