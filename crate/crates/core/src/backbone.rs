//! Frozen inpainting surrogate.
//!
//! Two parts:
//!
//! * a per-patch vector-quantized autoencoder (linear feature map, nearest
//!   codebook entry, linear pixel decoder) that defines the discrete token
//!   space, and
//! * a transformer encoder over canvas cells whose per-cell output is a logit
//!   vector over the codebook (the "continuous token").
//!
//! The codebook size always equals the feature dimension.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::{CanvasLayout, Quadrant};
use crate::data::{Image, PromptDatabase, PromptPair};
use crate::error::{Error, Result};
use crate::nn::{linear, self_attention};
use crate::real::Real;
use crate::tensor::{kernels, Adam, Tape, Tensor, Var};

/// Identifies the checkpoint layout of [`Backbone`].
pub const BACKBONE_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;

/// Quantizer steps between dead-code checks.
const REVIVE_EVERY: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Sub-image grid (cells per side).
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    /// Feature dimension; also the codebook size.
    pub dim: usize,
    pub depth: usize,
    pub ff_mult: usize,
}

impl BackboneConfig {
    /// Sub-images of `image_size²` pixels cut into `patch_size²` patches.
    pub fn for_image(image_size: usize, patch_size: usize, dim: usize) -> Result<Self> {
        if patch_size == 0 || !image_size.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "image size {image_size} is not divisible by patch size {patch_size}"
            )));
        }
        let cfg = BackboneConfig {
            grid_h: image_size / patch_size,
            grid_w: image_size / patch_size,
            patch_size,
            dim,
            depth: 2,
            ff_mult: 4,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0
            || self.grid_w == 0
            || self.patch_size == 0
            || self.dim < 2
            || self.ff_mult == 0
        {
            return Err(Error::Config(format!("invalid backbone config {self:?}")));
        }
        Ok(())
    }

    pub fn codebook_size(&self) -> usize {
        self.dim
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn layout(&self) -> CanvasLayout {
        CanvasLayout::new(self.grid_h, self.grid_w)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_h * self.patch_size, self.grid_w * self.patch_size)
    }
}

/// Codebook indices of a grid of patches (0-based, row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub ff1: Tensor<T>,
    pub ff1_bias: Tensor<T>,
    pub ff2: Tensor<T>,
    pub ff2_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    // patch embedding
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos_sub: Tensor<T>,
    // canvas encoder
    pub pos_canvas: Tensor<T>,
    pub mask_token: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    // quantizer
    pub quant_w: Tensor<T>,
    pub quant_b: Tensor<T>,
    pub codebook: Tensor<T>,
    pub decoder_w: Tensor<T>,
    pub decoder_b: Tensor<T>,
}

/// Tape handles for the encoder side of a [`Backbone`].
pub struct BackboneVars {
    patch_w: Var,
    patch_b: Var,
    pos_sub: Var,
    pos_canvas: Var,
    pub mask_token: Var,
    blocks: Vec<[Var; 12]>,
    lnf: (Var, Var),
    head: (Var, Var),
}

impl<T: Real> EncoderBlock<T> {
    fn init<R: Rng + ?Sized>(dim: usize, ff: usize, rng: &mut R) -> Self {
        EncoderBlock {
            ln1_gain: Tensor::full(&[dim], T::one()),
            ln1_bias: Tensor::zeros(&[dim]),
            wq: Tensor::xavier(&[dim, dim], dim, dim, rng),
            wk: Tensor::xavier(&[dim, dim], dim, dim, rng),
            wv: Tensor::xavier(&[dim, dim], dim, dim, rng),
            wo: Tensor::xavier(&[dim, dim], dim, dim, rng),
            ln2_gain: Tensor::full(&[dim], T::one()),
            ln2_bias: Tensor::zeros(&[dim]),
            ff1: Tensor::xavier(&[dim, ff], dim, ff, rng),
            ff1_bias: Tensor::zeros(&[ff]),
            ff2: Tensor::xavier(&[ff, dim], ff, dim, rng),
            ff2_bias: Tensor::zeros(&[dim]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff1,
            &self.ff1_bias,
            &self.ff2,
            &self.ff2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff1,
            &mut self.ff1_bias,
            &mut self.ff2,
            &mut self.ff2_bias,
        ]
    }
}

const BLOCK_NAMES: [&str; 12] = [
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "ff1", "ff1_bias",
    "ff2", "ff2_bias",
];

impl<T: Real> Backbone<T> {
    /// Randomly initialized, untrained backbone.
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, pl, l, nc) = (
            cfg.dim,
            cfg.patch_len(),
            cfg.grid_h * cfg.grid_w,
            cfg.codebook_size(),
        );
        let ff = d * cfg.ff_mult;
        Ok(Backbone {
            cfg,
            patch_w: Tensor::xavier(&[pl, d], pl, d, &mut rng),
            patch_b: Tensor::zeros(&[d]),
            pos_sub: Tensor::uniform(&[l, d], 0.02, &mut rng),
            pos_canvas: canvas_positions(cfg),
            mask_token: Tensor::uniform(&[1, d], 0.02, &mut rng),
            blocks: (0..cfg.depth)
                .map(|_| EncoderBlock::init(d, ff, &mut rng))
                .collect(),
            lnf_gain: Tensor::full(&[d], T::one()),
            lnf_bias: Tensor::zeros(&[d]),
            head_w: Tensor::xavier(&[d, nc], d, nc, &mut rng),
            head_b: Tensor::zeros(&[nc]),
            quant_w: Tensor::xavier(&[pl, d], pl, d, &mut rng),
            quant_b: Tensor::zeros(&[d]),
            codebook: Tensor::uniform(&[nc, d], 1.0, &mut rng),
            decoder_w: Tensor::xavier(&[d, pl], d, pl, &mut rng),
            decoder_b: Tensor::zeros(&[pl]),
        })
    }

    pub fn layout(&self) -> CanvasLayout {
        self.cfg.layout()
    }

    /// Every tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("pos_sub".into(), &self.pos_sub),
            ("pos_canvas".into(), &self.pos_canvas),
            ("mask_token".into(), &self.mask_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.extend([
            ("lnf_gain".into(), &self.lnf_gain),
            ("lnf_bias".into(), &self.lnf_bias),
            ("head_w".into(), &self.head_w),
            ("head_b".into(), &self.head_b),
            ("quant_w".into(), &self.quant_w),
            ("quant_b".into(), &self.quant_b),
            ("codebook".into(), &self.codebook),
            ("decoder_w".into(), &self.decoder_w),
            ("decoder_b".into(), &self.decoder_b),
        ]);
        out
    }

    /// Mutable access in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos_sub,
            &mut self.pos_canvas,
            &mut self.mask_token,
        ];
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.quant_w,
            &mut self.quant_b,
            &mut self.codebook,
            &mut self.decoder_w,
            &mut self.decoder_b,
        ]);
        out
    }

    /// Encoder-side tensors (everything except the quantizer), mutable.
    fn encoder_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut all = self.tensors_mut();
        all.truncate(all.len() - 5);
        all
    }

    /// Quantizer tensors, mutable.
    fn quantizer_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let all = self.tensors_mut();
        let n = all.len();
        all.into_iter().skip(n - 5).collect()
    }

    /// Marks every tensor gradient-free.
    pub fn freeze(&mut self) {
        for t in self.tensors_mut() {
            t.set_requires_grad(false);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        let blk = |b: &EncoderBlock<T>| EncoderBlock {
            ln1_gain: b.ln1_gain.cast(),
            ln1_bias: b.ln1_bias.cast(),
            wq: b.wq.cast(),
            wk: b.wk.cast(),
            wv: b.wv.cast(),
            wo: b.wo.cast(),
            ln2_gain: b.ln2_gain.cast(),
            ln2_bias: b.ln2_bias.cast(),
            ff1: b.ff1.cast(),
            ff1_bias: b.ff1_bias.cast(),
            ff2: b.ff2.cast(),
            ff2_bias: b.ff2_bias.cast(),
        };
        Backbone {
            cfg: self.cfg,
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            pos_sub: self.pos_sub.cast(),
            pos_canvas: self.pos_canvas.cast(),
            mask_token: self.mask_token.cast(),
            blocks: self.blocks.iter().map(blk).collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
            quant_w: self.quant_w.cast(),
            quant_b: self.quant_b.cast(),
            codebook: self.codebook.cast(),
            decoder_w: self.decoder_w.cast(),
            decoder_b: self.decoder_b.cast(),
        }
    }

    /// Registers the encoder-side tensors on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BackboneVars {
        BackboneVars {
            patch_w: tape.leaf(&self.patch_w),
            patch_b: tape.leaf(&self.patch_b),
            pos_sub: tape.leaf(&self.pos_sub),
            pos_canvas: tape.leaf(&self.pos_canvas),
            mask_token: tape.leaf(&self.mask_token),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let ts = b.tensors();
                    core::array::from_fn(|i| tape.leaf(ts[i]))
                })
                .collect(),
            lnf: (tape.leaf(&self.lnf_gain), tape.leaf(&self.lnf_bias)),
            head: (tape.leaf(&self.head_w), tape.leaf(&self.head_b)),
        }
    }

    /// Patch embedding of one sub-image: `[cells × D]`.
    pub fn embed_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &BackboneVars,
        image: &Image,
    ) -> Result<Var> {
        let (gh, gw) = image.grid(self.cfg.patch_size)?;
        if (gh, gw) != (self.cfg.grid_h, self.cfg.grid_w) {
            return Err(Error::dim(
                "embed_patches",
                &[image.height, image.width],
                &[
                    self.cfg.grid_h * self.cfg.patch_size,
                    self.cfg.grid_w * self.cfg.patch_size,
                ],
            ));
        }
        let patches = tape.constant(image.patches(self.cfg.patch_size)?);
        let e = linear(tape, patches, vars.patch_w, vars.patch_b)?;
        tape.add(e, vars.pos_sub)
    }

    /// `[cells × D]` copies of the mask token.
    pub fn mask_tape(&self, tape: &mut Tape<T>, vars: &BackboneVars) -> Result<Var> {
        tape.gather_rows(vars.mask_token, &vec![0; self.layout().cells()])
    }

    /// Canvas features `[4·cells × D]` (canvas row-major) to per-cell codebook
    /// logits `[4·cells × N_c]`.
    pub fn encode_tape(&self, tape: &mut Tape<T>, vars: &BackboneVars, canvas: Var) -> Result<Var> {
        let expected = [self.layout().canvas_cells(), self.cfg.dim];
        if tape.value(canvas).shape() != expected {
            return Err(Error::dim(
                "encode_continuous",
                tape.value(canvas).shape(),
                &expected,
            ));
        }
        let eps = T::of(LN_EPS);
        let mut x = tape.add(canvas, vars.pos_canvas)?;
        for b in &vars.blocks {
            let h = tape.layer_norm(x, b[0], b[1], eps)?;
            let a = self_attention(tape, h, b[2], b[3], b[4], b[5])?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, b[6], b[7], eps)?;
            let f = linear(tape, h, b[8], b[9])?;
            let f = tape.gelu(f)?;
            let f = linear(tape, f, b[10], b[11])?;
            x = tape.add(x, f)?;
        }
        let h = tape.layer_norm(x, vars.lnf.0, vars.lnf.1, eps)?;
        linear(tape, h, vars.head.0, vars.head.1)
    }

    /// Eager patch embedding.
    pub fn embed_patches(&self, image: &Image) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let e = self.embed_tape(&mut tape, &vars, image)?;
        Ok(tape.value(e).clone())
    }

    /// Eager encoder pass over a `[4·cells × D]` canvas.
    pub fn encode_continuous(&self, canvas: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let c = tape.constant(canvas.clone());
        let logits = self.encode_tape(&mut tape, &vars, c)?;
        Ok(tape.value(logits).clone())
    }

    /// Quantizer feature map of flattened patches `[n × P²·3] -> [n × D]`.
    pub fn quantizer_features(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let mut z = patches.matmul(&self.quant_w)?;
        let d = self.cfg.dim;
        for row in z.data_mut().chunks_exact_mut(d) {
            row.iter_mut()
                .zip(self.quant_b.data())
                .for_each(|(a, &b)| *a += b);
        }
        Ok(z)
    }

    /// Nearest codebook entry by squared distance; ties go to the lowest index.
    pub fn nearest_code(&self, feature: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (k, code) in self.codebook.data().chunks_exact(self.cfg.dim).enumerate() {
            let mut dist = T::zero();
            for (&a, &b) in feature.iter().zip(code) {
                dist += (a - b) * (a - b);
            }
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        best
    }

    /// Discrete tokens of an image whose sides are multiples of the patch size.
    pub fn quantize(&self, image: &Image) -> Result<IndexGrid> {
        let (gh, gw) = image.grid(self.cfg.patch_size)?;
        let z = self.quantizer_features(&image.patches(self.cfg.patch_size)?)?;
        let indices = (0..z.rows()).map(|r| self.nearest_code(z.row(r))).collect();
        Ok(IndexGrid {
            grid_h: gh,
            grid_w: gw,
            indices,
        })
    }

    /// Codebook lookup, linear pixel map, clamp to `[0, 1]`.
    pub fn decode(&self, grid: &IndexGrid) -> Result<Image> {
        let (d, nc, pl) = (self.cfg.dim, self.cfg.codebook_size(), self.cfg.patch_len());
        let mut pixels = Vec::with_capacity(grid.indices.len() * pl);
        let mut row = vec![T::zero(); pl];
        for &idx in &grid.indices {
            if idx >= nc {
                return Err(Error::Index {
                    op: "decode",
                    index: idx,
                    len: nc,
                });
            }
            let code = &self.codebook.data()[idx * d..(idx + 1) * d];
            kernels::matmul(code, self.decoder_w.data(), 1, d, pl, &mut row);
            for (v, &b) in row.iter_mut().zip(self.decoder_b.data()) {
                *v += b;
            }
            pixels.extend_from_slice(&row);
        }
        let t = Tensor::new(&[grid.indices.len(), pl], pixels)?;
        Image::from_patches(&t, grid.grid_h, grid.grid_w, self.cfg.patch_size)
    }

    /// Tokens of the 2×2 pixel canvas `[tl tr; bl br]`, split per quadrant
    /// (each in sub-image row-major order).
    pub fn canvas_tokens(
        &self,
        tl: &Image,
        tr: &Image,
        bl: &Image,
        br: &Image,
    ) -> Result<[Vec<usize>; 4]> {
        let canvas = Image::quad(tl, tr, bl, br)?;
        let grid = self.quantize(&canvas)?;
        let layout = self.layout();
        Ok(Quadrant::ALL.map(|q| {
            layout
                .quadrant_rows(q)
                .into_iter()
                .map(|r| grid.indices[r])
                .collect()
        }))
    }

    /// Pixel canvas features `[prompt image, prompt label; query, mask]`.
    pub fn pixel_canvas_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &BackboneVars,
        prompt: &PromptPair,
        query: &Image,
    ) -> Result<Var> {
        let ex = self.embed_tape(tape, vars, &prompt.image)?;
        let ey = self.embed_tape(tape, vars, &prompt.label)?;
        let eq = self.embed_tape(tape, vars, query)?;
        let m = self.mask_tape(tape, vars)?;
        let stack = tape.concat_rows(&[ex, ey, eq, m])?;
        tape.gather_rows(stack, &self.layout().assemble_permutation())
    }

    /// Predicted answer-quadrant tokens for a single-prompt pixel canvas.
    pub fn predict_answer(&self, prompt: &PromptPair, query: &Image) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let canvas = self.pixel_canvas_tape(&mut tape, &vars, prompt, query)?;
        let logits = self.encode_tape(&mut tape, &vars, canvas)?;
        let rows = self.layout().quadrant_rows(Quadrant::Answer);
        let v = tape.value(logits);
        Ok(rows.iter().map(|&r| argmax(v.row(r))).collect())
    }

    /// Fraction of answer cells whose predicted token equals the quantizer
    /// token of the true label, with the top-1 retrieved database pair as
    /// the prompt.
    pub fn masked_token_accuracy(
        &self,
        db: &PromptDatabase,
        queries: &[PromptPair],
    ) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for q in queries {
            let top = db.retrieve_ranked(&q.image, 1, Some(q.id))?;
            let prompt = db.get(top[0].index);
            let pred = self.predict_answer(prompt, &q.image)?;
            let truth = self.quantize(&q.label)?.indices;
            hit += pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
            total += truth.len();
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    /// Mean squared pixel error of `decode(quantize(x))` over `images`.
    pub fn reconstruction_mse<'a>(
        &self,
        images: impl IntoIterator<Item = &'a Image>,
    ) -> Result<f64> {
        let (mut sse, mut n) = (0f64, 0usize);
        for im in images {
            let rec = self.decode(&self.quantize(im)?)?;
            for (&a, &b) in im.data.iter().zip(&rec.data) {
                sse += (a as f64 - b as f64).powi(2);
            }
            n += im.data.len();
        }
        Ok(sse / n.max(1) as f64)
    }

    /// Smallest pairwise distance between codebook entries.
    pub fn min_code_distance(&self) -> f64 {
        let d = self.cfg.dim;
        let codes: Vec<&[T]> = self.codebook.data().chunks_exact(d).collect();
        let mut best = f64::INFINITY;
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                let dist: f64 = codes[i]
                    .iter()
                    .zip(codes[j])
                    .map(|(&a, &b)| (a - b).as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(dist);
            }
        }
        best
    }
}

/// Initial canvas position table: a 2-D sinusoid of the cell's position
/// inside its quadrant (identical for the four quadrants) plus a quadrant
/// one-hot. Matching cells of different quadrants start out with equal
/// position codes, which makes quadrant-to-quadrant copying easy to learn.
fn canvas_positions<T: Real>(cfg: BackboneConfig) -> Tensor<T> {
    let (gh, gw, d) = (cfg.grid_h, cfg.grid_w, cfg.dim);
    let width = 2 * gw;
    let freqs = d / 8;
    Tensor::from_fn(&[4 * gh * gw, d], |i| {
        let (cell, j) = (i / d, i % d);
        let (r, c) = (cell / width, cell % width);
        let (h, w, quad) = (r % gh, c % gw, (r / gh) * 2 + c / gw);
        let wave = |pos: usize, len: usize, k: usize, cos: bool| {
            let a = core::f64::consts::PI * pos as f64 * (k + 1) as f64 / len as f64;
            if cos {
                a.cos()
            } else {
                a.sin()
            }
        };
        let v = if j < 2 * freqs {
            wave(h, gh, j / 2, j % 2 == 1)
        } else if j < 4 * freqs {
            wave(w, gw, (j - 2 * freqs) / 2, j % 2 == 1)
        } else if j - 4 * freqs < 4 {
            f64::from(u8::from(j - 4 * freqs == quad))
        } else {
            0.0
        };
        T::of(v)
    })
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Backbone pretraining recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub vq_steps: usize,
    pub vq_batch: usize,
    pub vq_lr: f64,
    pub commitment: f64,
    pub encoder_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of using the query's own pair as the prompt.
    pub p_self_prompt: f64,
    /// Probability of pairing a query with a random prompt instead of its
    /// nearest neighbour.
    pub p_random_prompt: f64,
    /// Loss weight of the visible (non-masked) cells.
    pub visible_weight: f64,
    /// Failure threshold on the final reconstruction MSE.
    pub max_recon_mse: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            vq_steps: 1000,
            vq_batch: 256,
            vq_lr: 3e-3,
            commitment: 0.25,
            encoder_epochs: 10,
            batch_size: 4,
            lr: 5e-3,
            p_self_prompt: 0.25,
            p_random_prompt: 0.15,
            visible_weight: 0.2,
            max_recon_mse: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub recon_mse: f64,
    pub codes_in_use: usize,
    pub encoder_loss: Vec<f64>,
    pub train_masked_accuracy: f64,
}

/// Progress events emitted by [`pretrain`].
#[derive(Clone, Debug)]
pub enum PretrainEvent {
    Quantizer {
        step: usize,
        loss: f64,
    },
    EncoderEpoch {
        epoch: usize,
        loss: f64,
        masked_accuracy: f64,
    },
}

/// Trains a backbone from scratch on the pairs of `db`, then freezes it.
pub fn pretrain(
    db: &PromptDatabase,
    cfg: BackboneConfig,
    pcfg: &PretrainConfig,
    on_event: &mut dyn FnMut(PretrainEvent),
) -> Result<(Backbone<f32>, PretrainReport)> {
    if db.is_empty() {
        return Err(Error::Config(
            "pretraining needs a non-empty dataset".into(),
        ));
    }
    let mut bb = Backbone::<f32>::init(cfg, pcfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut report = PretrainReport::default();

    train_quantizer(&mut bb, db, pcfg, &mut rng, on_event)?;
    report.recon_mse =
        bb.reconstruction_mse(db.pairs().iter().flat_map(|p| [&p.image, &p.label]))?;
    if !(report.recon_mse <= pcfg.max_recon_mse) {
        return Err(Error::PretrainFailure {
            mse: report.recon_mse,
        });
    }

    let tokens: Vec<(Vec<usize>, Vec<usize>)> = db
        .pairs()
        .iter()
        .map(|p| {
            Ok((
                bb.quantize(&p.image)?.indices,
                bb.quantize(&p.label)?.indices,
            ))
        })
        .collect::<Result<_>>()?;
    let mut used = vec![false; cfg.codebook_size()];
    for (a, b) in &tokens {
        a.iter().chain(b).for_each(|&i| used[i] = true);
    }
    report.codes_in_use = used.iter().filter(|&&u| u).count();

    let neighbours: Vec<usize> = db
        .pairs()
        .iter()
        .map(|p| {
            let hits = db.rank(&p.image, Some(p.id));
            hits.first().map_or(0, |h| h.index)
        })
        .collect();

    for t in bb.encoder_tensors_mut() {
        t.set_requires_grad(true);
    }
    let mut adam = Adam::<f32>::new();
    let layout = bb.layout();
    let answer_rows = layout.quadrant_rows(Quadrant::Answer);
    let visible_rows: Vec<usize> = [
        Quadrant::PromptImage,
        Quadrant::PromptLabel,
        Quadrant::QueryImage,
    ]
    .iter()
    .flat_map(|&q| layout.quadrant_rows(q))
    .collect();
    let total_steps = pcfg.encoder_epochs * db.len().div_ceil(pcfg.batch_size.max(1));
    let mut step = 0usize;
    for epoch in 0..pcfg.encoder_epochs {
        let mut order: Vec<usize> = (0..db.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut cells) = (0f64, 0usize, 0usize);
        for batch in order.chunks(pcfg.batch_size.max(1)) {
            for &qi in batch {
                let u = rng.random::<f64>();
                let pi = if u < pcfg.p_self_prompt {
                    qi
                } else if db.len() > 1 && u < pcfg.p_self_prompt + pcfg.p_random_prompt {
                    let j = rng.random_range(0..db.len() - 1);
                    if j >= qi {
                        j + 1
                    } else {
                        j
                    }
                } else {
                    neighbours[qi]
                };
                let (q, p) = (db.get(qi), db.get(pi));
                let mut tape = Tape::new();
                let vars = bb.bind(&mut tape);
                let canvas = bb.pixel_canvas_tape(&mut tape, &vars, p, &q.image)?;
                let logits = bb.encode_tape(&mut tape, &vars, canvas)?;
                let ans = tape.gather_rows(logits, &answer_rows)?;
                let vis = tape.gather_rows(logits, &visible_rows)?;
                let (ans_t, vis_t) = {
                    let mut v = tokens[pi].0.clone();
                    v.extend_from_slice(&tokens[pi].1);
                    v.extend_from_slice(&tokens[qi].0);
                    (tokens[qi].1.clone(), v)
                };
                {
                    let av = tape.value(ans);
                    for (r, &t) in ans_t.iter().enumerate() {
                        hits += usize::from(argmax(av.row(r)) == t);
                    }
                    cells += ans_t.len();
                }
                let l_ans = tape.cross_entropy_rows(ans, &ans_t)?;
                let l_vis = tape.cross_entropy_rows(vis, &vis_t)?;
                let l_vis = tape.scale(l_vis, pcfg.visible_weight as f32)?;
                let loss = tape.add(l_ans, l_vis)?;
                let scaled = tape.scale(loss, 1.0 / batch.len() as f32)?;
                loss_sum += tape.value(loss).data()[0] as f64;
                let grads = tape.backward(scaled)?;
                accumulate_backbone(&mut bb, &vars, &grads)?;
            }
            // linear warm-up then cosine decay
            let warm = (total_steps / 20).max(1);
            let lr = if step < warm {
                pcfg.lr * (step + 1) as f64 / warm as f64
            } else {
                let t = (step - warm) as f64 / (total_steps - warm).max(1) as f64;
                pcfg.lr * 0.5 * (1.0 + (core::f64::consts::PI * t).cos())
            };
            adam.step(&mut bb.encoder_tensors_mut(), lr as f32)?;
            step += 1;
        }
        let loss = loss_sum / db.len() as f64;
        let acc = hits as f64 / cells.max(1) as f64;
        report.encoder_loss.push(loss);
        report.train_masked_accuracy = acc;
        on_event(PretrainEvent::EncoderEpoch {
            epoch,
            loss,
            masked_accuracy: acc,
        });
    }
    bb.freeze();
    Ok((bb, report))
}

fn accumulate_backbone<T: Real>(
    bb: &mut Backbone<T>,
    vars: &BackboneVars,
    grads: &crate::tensor::Grads<T>,
) -> Result<()> {
    grads.accumulate_into(vars.patch_w, &mut bb.patch_w)?;
    grads.accumulate_into(vars.patch_b, &mut bb.patch_b)?;
    grads.accumulate_into(vars.pos_sub, &mut bb.pos_sub)?;
    grads.accumulate_into(vars.pos_canvas, &mut bb.pos_canvas)?;
    grads.accumulate_into(vars.mask_token, &mut bb.mask_token)?;
    for (b, bv) in bb.blocks.iter_mut().zip(&vars.blocks) {
        for (t, &v) in b.tensors_mut().into_iter().zip(bv) {
            grads.accumulate_into(v, t)?;
        }
    }
    grads.accumulate_into(vars.lnf.0, &mut bb.lnf_gain)?;
    grads.accumulate_into(vars.lnf.1, &mut bb.lnf_bias)?;
    grads.accumulate_into(vars.head.0, &mut bb.head_w)?;
    grads.accumulate_into(vars.head.1, &mut bb.head_b)?;
    Ok(())
}

/// k-means++ seeding over the rows of `z`; rows equal to an existing centre
/// are never picked twice, leftover centres stay where they are.
fn seed_codebook<R: Rng + ?Sized>(codebook: &mut Tensor<f32>, z: &Tensor<f32>, rng: &mut R) {
    let d = z.cols();
    let n = z.rows();
    let k = codebook.rows();
    let mut nearest = vec![f32::INFINITY; n];
    let mut centre = z.row(rng.random_range(0..n)).to_vec();
    for c in 0..k {
        codebook.data_mut()[c * d..(c + 1) * d].copy_from_slice(&centre);
        let mut total = 0f64;
        for (r, best) in nearest.iter_mut().enumerate() {
            let dist: f32 = z
                .row(r)
                .iter()
                .zip(&centre)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *best = best.min(dist);
            total += *best as f64;
        }
        if total <= 1e-12 || c + 1 == k {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (r, &w) in nearest.iter().enumerate() {
            u -= w as f64;
            if u <= 0.0 && w > 0.0 {
                pick = r;
                break;
            }
        }
        centre = z.row(pick).to_vec();
    }
}

fn train_quantizer(
    bb: &mut Backbone<f32>,
    db: &PromptDatabase,
    pcfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    on_event: &mut dyn FnMut(PretrainEvent),
) -> Result<()> {
    let p = bb.cfg.patch_size;
    let mut rows: Vec<f32> = Vec::new();
    for pair in db.pairs() {
        for im in [&pair.image, &pair.label] {
            rows.extend_from_slice(im.patches::<f32>(p)?.data());
        }
    }
    let pl = bb.cfg.patch_len();
    let all = Tensor::new(&[rows.len() / pl, pl], rows)?;
    let n = all.rows();

    // unused codes start far from the data so they never capture it
    let far = Tensor::<f32>::uniform(bb.codebook.shape(), 1.0, rng);
    for (c, f) in bb.codebook.data_mut().iter_mut().zip(far.data()) {
        *c = 50.0 + *f;
    }
    let z0 = bb.quantizer_features(&all)?;
    let mut codebook = bb.codebook.clone();
    seed_codebook(&mut codebook, &z0, rng);
    bb.codebook = codebook;

    for t in bb.quantizer_tensors_mut() {
        t.set_requires_grad(true);
    }
    let mut adam = Adam::<f32>::new();
    let batch = pcfg.vq_batch.min(n).max(1);
    let mut usage = vec![0usize; bb.cfg.codebook_size()];
    for step in 0..pcfg.vq_steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let mut data = Vec::with_capacity(batch * pl);
        for &i in &idx {
            data.extend_from_slice(all.row(i));
        }
        let x = Tensor::new(&[batch, pl], data)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (w, b) = (tape.leaf(&bb.quant_w), tape.leaf(&bb.quant_b));
        let cb = tape.leaf(&bb.codebook);
        let (dw, db_) = (tape.leaf(&bb.decoder_w), tape.leaf(&bb.decoder_b));
        let z = linear(&mut tape, xv, w, b)?;
        let codes: Vec<usize> = {
            let zv = tape.value(z);
            (0..batch).map(|r| bb.nearest_code(zv.row(r))).collect()
        };
        let e = tape.gather_rows(cb, &codes)?;
        let zq = tape.straight_through(z, e)?;
        let rec = linear(&mut tape, zq, dw, db_)?;
        let recon = mse(&mut tape, rec, xv)?;
        let zs = tape.detach(z);
        let cbl = mse(&mut tape, e, zs)?;
        let es = tape.detach(e);
        let commit = mse(&mut tape, z, es)?;
        let commit = tape.scale(commit, pcfg.commitment as f32)?;
        let l = tape.add(recon, cbl)?;
        let loss = tape.add(l, commit)?;
        let lv = tape.value(loss).data()[0] as f64;
        for &c in &codes {
            usage[c] += 1;
        }
        // per-sample reconstruction error, for reviving dead codes below
        let worst: Vec<(f32, usize)> = {
            let (rv, xv_) = (tape.value(rec), tape.value(xv));
            let mut errs: Vec<(f32, usize)> = (0..batch)
                .map(|r| {
                    let e: f32 = rv
                        .row(r)
                        .iter()
                        .zip(xv_.row(r))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (e, r)
                })
                .collect();
            errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            errs
        };
        let zvals = tape.value(z).clone();
        let grads = tape.backward(loss)?;
        grads.accumulate_into(w, &mut bb.quant_w)?;
        grads.accumulate_into(b, &mut bb.quant_b)?;
        grads.accumulate_into(cb, &mut bb.codebook)?;
        grads.accumulate_into(dw, &mut bb.decoder_w)?;
        grads.accumulate_into(db_, &mut bb.decoder_b)?;
        adam.step(&mut bb.quantizer_tensors_mut(), pcfg.vq_lr as f32)?;
        if (step + 1) % REVIVE_EVERY == 0 {
            if step < pcfg.vq_steps * 4 / 5 {
                let dead = usage
                    .iter()
                    .enumerate()
                    .filter(|(_, &u)| u == 0)
                    .map(|(k, _)| k);
                let d = bb.cfg.dim;
                for (k, &(_, r)) in dead.zip(worst.iter().filter(|(e, _)| *e > 1e-4)) {
                    bb.codebook.data_mut()[k * d..(k + 1) * d].copy_from_slice(zvals.row(r));
                }
            }
            usage.iter_mut().for_each(|u| *u = 0);
        }
        if step % 50 == 0 || step + 1 == pcfg.vq_steps {
            on_event(PretrainEvent::Quantizer { step, loss: lv });
        }
    }
    for t in bb.quantizer_tensors_mut() {
        t.set_requires_grad(false);
    }
    Ok(())
}

fn mse<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}
