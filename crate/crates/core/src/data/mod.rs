//! Prompt pairs, synthetic tasks, pixel-level retrieval and training-time
//! prompt substitution.

mod augment;
mod image;
mod retrieval;
mod synth;

pub use augment::{augment, AugmentConfig, Mode};
pub use image::{luminance_u8, Image};
pub use retrieval::{pixel_cosine, PromptDatabase, Ranked};
pub use synth::{
    generate_dataset, make_pair, mask_bbox, render_scene, Scene, ShapeClass, TaskKind, TaskSpec,
    PALETTE,
};

/// An (image, label) demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub id: u32,
    pub class_tag: u32,
    pub image: Image,
    pub label: Image,
}
