//! Synthetic scene generator for the three tasks.
//!
//! A scene is a textured background with one foreground shape. Both colors
//! come from the same palette, so which region is "foreground" is not
//! decidable from color alone. Shapes are rasterized on the patch lattice:
//! every patch is either entirely foreground or entirely background.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{luminance_u8, Image};
use super::retrieval::PromptDatabase;
use super::PromptPair;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "seg")]
    Segmentation,
    #[serde(rename = "det")]
    Detection,
    #[serde(rename = "color")]
    Colorization,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seg" | "segmentation" => Ok(TaskKind::Segmentation),
            "det" | "detection" => Ok(TaskKind::Detection),
            "color" | "colorization" => Ok(TaskKind::Colorization),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected seg, det or color)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "seg",
            TaskKind::Detection => "det",
            TaskKind::Colorization => "color",
        }
    }

    /// Default locality spread for the task.
    pub fn default_sigma(self) -> f64 {
        match self {
            TaskKind::Segmentation => 0.65,
            TaskKind::Detection => 0.5,
            TaskKind::Colorization => 2.5,
        }
    }

    pub fn uses_masks(self) -> bool {
        !matches!(self, TaskKind::Colorization)
    }
}

/// Foreground shape family; doubles as the class tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Ellipse = 0,
    Rectangle = 1,
    Triangle = 2,
    Diamond = 3,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Ellipse,
        ShapeClass::Rectangle,
        ShapeClass::Triangle,
        ShapeClass::Diamond,
    ];

    fn contains(self, dy: f64, dx: f64, ry: f64, rx: f64) -> bool {
        match self {
            ShapeClass::Ellipse => (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0,
            ShapeClass::Rectangle => dy.abs() <= ry && dx.abs() <= rx,
            ShapeClass::Diamond => dy.abs() / ry + dx.abs() / rx <= 1.0,
            ShapeClass::Triangle => {
                if dy.abs() > ry {
                    return false;
                }
                let half = rx * (dy + ry) / (2.0 * ry);
                dx.abs() <= half
            }
        }
    }
}

/// 8-bit palette shared by foreground and background. Luminances are
/// pairwise distinct so colorization is well posed.
pub const PALETTE: [[u8; 3]; 6] = [
    [30, 40, 130],
    [200, 40, 40],
    [50, 140, 50],
    [220, 200, 50],
    [60, 190, 210],
    [190, 70, 190],
];

/// Added to every channel of background pixels on striped rows.
const STRIPE_OFFSET: u8 = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub image_size: usize,
    pub patch_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Shape half-extent range in patch units.
    pub min_radius: f64,
    pub max_radius: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        TaskSpec {
            kind,
            image_size: 32,
            patch_size: 4,
            train_size: 512,
            test_size: 128,
            min_radius: 1.2,
            max_radius: 3.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("dataset split sizes must be positive".into()));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        let grid = self.image_size / self.patch_size;
        if grid < 4 {
            return Err(Error::Config(format!("grid {grid} too small for shapes")));
        }
        if !(self.min_radius > 0.0 && self.max_radius >= self.min_radius) {
            return Err(Error::Config("invalid shape radius range".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// One rendered scene before task-specific labelling.
#[derive(Clone, Debug)]
pub struct Scene {
    pub class: ShapeClass,
    /// Row-major `grid × grid` foreground cells.
    pub mask: Vec<bool>,
    /// Colored scene, 8-bit RGB.
    pub rgb: Vec<u8>,
}

fn scene_rng(seed: u64, id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng
}

pub fn render_scene(spec: &TaskSpec, id: u32) -> Scene {
    let mut rng = scene_rng(spec.seed, id);
    let g = spec.grid();
    let class = ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())];
    let bg = rng.random_range(0..PALETTE.len());
    let mut fg = rng.random_range(0..PALETTE.len() - 1);
    if fg >= bg {
        fg += 1;
    }
    let striped = rng.random_bool(0.5);
    let mask = loop {
        let ry = rng.random_range(spec.min_radius..=spec.max_radius);
        let rx = rng.random_range(spec.min_radius..=spec.max_radius);
        let cy = rng.random_range(1.5..(g as f64 - 1.5));
        let cx = rng.random_range(1.5..(g as f64 - 1.5));
        let mask: Vec<bool> = (0..g * g)
            .map(|c| {
                let (i, j) = ((c / g) as f64 + 0.5, (c % g) as f64 + 0.5);
                class.contains(i - cy, j - cx, ry, rx)
            })
            .collect();
        let count = mask.iter().filter(|&&m| m).count();
        if count >= 2 && count < g * g / 2 {
            break mask;
        }
    };
    let (size, p) = (spec.image_size, spec.patch_size);
    let mut rgb = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let cell = (y / p) * g + x / p;
            let base = if mask[cell] { PALETTE[fg] } else { PALETTE[bg] };
            let offset = if striped && !mask[cell] && (y % p) < p / 2 {
                STRIPE_OFFSET
            } else {
                0
            };
            for c in 0..3 {
                rgb[(y * size + x) * 3 + c] = base[c].saturating_add(offset);
            }
        }
    }
    Scene { class, mask, rgb }
}

/// Tight bounding box `(top, left, bottom, right)` (inclusive) of the mask cells.
pub fn mask_bbox(mask: &[bool], grid: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (c, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (i, j) = (c / grid, c % grid);
        bbox = Some(match bbox {
            None => (i, j, i, j),
            Some((t, l, b, r)) => (t.min(i), l.min(j), b.max(i), r.max(j)),
        });
    }
    bbox
}

fn mask_image(cells: &[bool], spec: &TaskSpec) -> Vec<u8> {
    let (size, p, g) = (spec.image_size, spec.patch_size, spec.grid());
    let mut out = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            if cells[(y / p) * g + x / p] {
                out[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&[255; 3]);
            }
        }
    }
    out
}

/// Renders scene `id` into an (image, label) pair for the spec's task.
pub fn make_pair(spec: &TaskSpec, id: u32) -> Result<PromptPair> {
    let scene = render_scene(spec, id);
    let (size, g) = (spec.image_size, spec.grid());
    let (image, label) = match spec.kind {
        TaskKind::Segmentation => (scene.rgb.clone(), mask_image(&scene.mask, spec)),
        TaskKind::Detection => {
            let (t, l, b, r) = mask_bbox(&scene.mask, g).expect("scene masks are non-empty");
            let boxed: Vec<bool> = (0..g * g)
                .map(|c| {
                    let (i, j) = (c / g, c % g);
                    i >= t && i <= b && j >= l && j <= r
                })
                .collect();
            (scene.rgb.clone(), mask_image(&boxed, spec))
        }
        TaskKind::Colorization => {
            let gray: Vec<u8> = scene
                .rgb
                .chunks_exact(3)
                .flat_map(|p| {
                    let l = luminance_u8(p[0], p[1], p[2]);
                    [l, l, l]
                })
                .collect();
            (gray, scene.rgb.clone())
        }
    };
    Ok(PromptPair {
        id,
        class_tag: scene.class as u32,
        image: Image::from_rgb8(size, size, &image)?,
        label: Image::from_rgb8(size, size, &label)?,
    })
}

/// Generates the training database and the test queries. Train ids are
/// `0..train_size`, test ids follow.
pub fn generate_dataset(spec: &TaskSpec) -> Result<(PromptDatabase, Vec<PromptPair>)> {
    spec.validate()?;
    let train = (0..spec.train_size as u32)
        .map(|id| make_pair(spec, id))
        .collect::<Result<Vec<_>>>()?;
    let start = spec.train_size as u32;
    let test = (start..start + spec.test_size as u32)
        .map(|id| make_pair(spec, id))
        .collect::<Result<Vec<_>>>()?;
    Ok((PromptDatabase::new(train)?, test))
}
