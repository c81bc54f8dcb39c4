//! On-disk datasets.
//!
//! ```text
//! <root>/train/manifest.json
//! <root>/train/pairs/<id>_img.png
//! <root>/train/pairs/<id>_lbl.png
//! <root>/test/...
//! ```
//!
//! Pixels are stored as 8-bit RGB. Generated images are 8-bit exact, so a
//! write/read cycle reproduces them bit for bit.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use prompthub_core::data::{generate_dataset, Image, PromptDatabase, PromptPair, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: u32,
    pub class_tag: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub spec: TaskSpec,
    pub pairs: Vec<PairEntry>,
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| AppError::Data(format!("png encode: {e}")))?;
        w.write_image_data(&image.to_rgb8())
            .map_err(|e| AppError::Data(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let err = |e: png::DecodingError| AppError::Data(format!("png decode: {e}"));
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| AppError::Data("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.line_size * h];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => px
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        png::ColorType::Indexed => return Err(AppError::Data("unexpanded palette png".into())),
    };
    Ok(Image::from_rgb8(h, w, &rgb)?)
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    fsutil::write_atomic(path, &encode_png(image)?)
}

pub fn read_png(path: &Path) -> Result<Image> {
    decode_png(&fsutil::read(path)?)
}

fn pair_paths(split_dir: &Path, id: u32) -> (PathBuf, PathBuf) {
    let pairs = split_dir.join("pairs");
    (
        pairs.join(format!("{id}_img.png")),
        pairs.join(format!("{id}_lbl.png")),
    )
}

pub fn write_split(dir: &Path, split: &str, spec: &TaskSpec, pairs: &[PromptPair]) -> Result<()> {
    for p in pairs {
        let (img, lbl) = pair_paths(dir, p.id);
        write_png(&img, &p.image)?;
        write_png(&lbl, &p.label)?;
    }
    let manifest = SplitManifest {
        split: split.to_string(),
        spec: spec.clone(),
        pairs: pairs
            .iter()
            .map(|p| PairEntry {
                id: p.id,
                class_tag: p.class_tag,
            })
            .collect(),
    };
    fsutil::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_split(dir: &Path) -> Result<(SplitManifest, Vec<PromptPair>)> {
    let path = dir.join("manifest.json");
    let manifest: SplitManifest = serde_json::from_slice(&fsutil::read(&path)?)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for e in &manifest.pairs {
        let (img, lbl) = pair_paths(dir, e.id);
        let image = read_png(&img)?;
        let label = read_png(&lbl)?;
        if (image.height, image.width) != (label.height, label.width) {
            return Err(AppError::Data(format!(
                "pair {}: image and label sizes differ",
                e.id
            )));
        }
        pairs.push(PromptPair {
            id: e.id,
            class_tag: e.class_tag,
            image,
            label,
        });
    }
    Ok((manifest, pairs))
}

/// A loaded dataset: the prompt database (train split) and test queries.
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: PromptDatabase,
    pub test: Vec<PromptPair>,
}

impl Dataset {
    pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
        let (train, test) = generate_dataset(spec)?;
        Ok(Dataset {
            spec: spec.clone(),
            train,
            test,
        })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_split(&root.join("train"), "train", &self.spec, self.train.pairs())?;
        write_split(&root.join("test"), "test", &self.spec, &self.test)
    }

    pub fn load(root: &Path) -> Result<Dataset> {
        let (m, train) = read_split(&root.join("train"))?;
        let (_, test) = read_split(&root.join("test"))?;
        if train.is_empty() {
            return Err(AppError::Data(format!(
                "{}: empty training split",
                root.display()
            )));
        }
        Ok(Dataset {
            spec: m.spec,
            train: PromptDatabase::new(train)?,
            test,
        })
    }
}
