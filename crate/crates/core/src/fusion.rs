//! Locality-aware prompt fusion.
//!
//! Query and prompt sub-images are embedded with the frozen backbone patch
//! embedding, aligned by one shared self-attention block, and the prompts
//! are collapsed into a single (image, label) feature pair by a
//! cross-attention whose scores are reweighted by a spatial prior around
//! each query cell. Keys come from the prompt images only; both value
//! streams reuse the same attention weights.
//!
//! Feature grids are stored as `[cells × D]` tensors with cells in
//! row-major grid order.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneVars};
use crate::canvas::CanvasLayout;
use crate::data::{Image, PromptPair};
use crate::error::{Error, Result};
use crate::locality::{distance_table, AdaptiveSigmaHead, LocalityConfig, PriorTable};
use crate::nn::{linear, self_attention};
use crate::real::Real;
use crate::tensor::{Grads, Tape, Tensor, Var};

/// Additive score for keys excluded by the patch-wise ablation.
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub num_prompts: usize,
    pub locality: LocalityConfig,
    /// Restrict every query cell to the same cell of each prompt
    /// (ablation baseline; no cross-position attention).
    #[serde(default)]
    pub patchwise: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            num_prompts: 4,
            locality: LocalityConfig::default(),
            patchwise: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 {
            return Err(Error::EmptyPrompts);
        }
        self.locality.validate()
    }
}

/// Learned fusion matrices, all `D×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_vx: Tensor<T>,
    pub w_vy: Tensor<T>,
    pub sa_q: Tensor<T>,
    pub sa_k: Tensor<T>,
    pub sa_v: Tensor<T>,
    pub sa_o: Tensor<T>,
}

const WEIGHT_NAMES: [&str; 8] = ["w_q", "w_k", "w_vx", "w_vy", "sa_q", "sa_k", "sa_v", "sa_o"];

impl<T: Real> FusionWeights<T> {
    /// Starts as a near pass-through: identity value maps and a zero
    /// self-alignment output, so the fused features begin as convex mixes
    /// of raw prompt embeddings.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let x = |rng: &mut R| Tensor::xavier(&[dim, dim], dim, dim, rng).with_grad();
        FusionWeights {
            w_q: x(rng),
            w_k: x(rng),
            w_vx: Tensor::identity(dim).with_grad(),
            w_vy: Tensor::identity(dim).with_grad(),
            sa_q: x(rng),
            sa_k: x(rng),
            sa_v: x(rng),
            sa_o: Tensor::zeros(&[dim, dim]).with_grad(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.w_q, &self.w_k, &self.w_vx, &self.w_vy, &self.sa_q, &self.sa_k, &self.sa_v,
            &self.sa_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_vx,
            &mut self.w_vy,
            &mut self.sa_q,
            &mut self.sa_k,
            &mut self.sa_v,
            &mut self.sa_o,
        ]
    }

    pub fn cast<U: Real>(&self) -> FusionWeights<U> {
        let [a, b, c, d, e, f, g, h] = self.tensors().map(|t| t.cast());
        FusionWeights {
            w_q: a,
            w_k: b,
            w_vx: c,
            w_vy: d,
            sa_q: e,
            sa_k: f,
            sa_v: g,
            sa_o: h,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for t in self.tensors() {
            if t.shape() != [d, d] {
                return Err(Error::dim("fusion_weights", t.shape(), &[d, d]));
            }
        }
        Ok(())
    }
}

/// Tape handles of a fusion module's parameters.
#[derive(Clone, Debug)]
pub struct FusionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_vx: Var,
    pub w_vy: Var,
    pub sa: [Var; 4],
    pub sigma_head: Option<(Var, Var)>,
}

/// Attention weights of every query cell over the joint key set of all
/// prompts: `weights` is `[L × N·L]`, column `i·L + k` is cell `k` of
/// prompt `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub grid: (usize, usize),
    pub num_prompts: usize,
    pub weights: Tensor<T>,
}

impl<T: Real> AttentionRecord<T> {
    /// Attention row of the 0-based query cell `(h, w)`.
    pub fn row(&self, h: usize, w: usize) -> &[T] {
        self.weights.row(h * self.grid.1 + w)
    }

    /// Total attention each key cell of prompt `i` receives, summed over
    /// query cells (`[L]`, row-major).
    pub fn prompt_heat(&self, i: usize) -> Result<Vec<T>> {
        if i >= self.num_prompts {
            return Err(Error::Index {
                op: "prompt_heat",
                index: i,
                len: self.num_prompts,
            });
        }
        let l = self.grid.0 * self.grid.1;
        let mut heat = vec![T::zero(); l];
        for q in 0..l {
            let row = &self.weights.row(q)[i * l..(i + 1) * l];
            heat.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        Ok(heat)
    }

    /// Share of the total attention mass that lands on each prompt.
    pub fn prompt_mass(&self) -> Vec<T> {
        let l = self.grid.0 * self.grid.1;
        let mut mass = vec![T::zero(); self.num_prompts];
        for q in 0..l {
            for (i, m) in mass.iter_mut().enumerate() {
                *m += self.weights.row(q)[i * l..(i + 1) * l]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        let inv = T::one() / T::of(l as f64);
        mass.iter_mut().for_each(|m| *m *= inv);
        mass
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrompt<T> {
    pub fx: Tensor<T>,
    pub fy: Tensor<T>,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput<T> {
    pub fused: FusedPrompt<T>,
    /// Aligned query features.
    pub fq: Tensor<T>,
    pub attention: AttentionRecord<T>,
    /// σ used for this query.
    pub sigma: T,
}

/// Tape values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionTape {
    pub eq: Var,
    pub fq: Var,
    pub fx: Var,
    pub fy: Var,
    pub attention: Var,
    pub sigma: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule<T> {
    pub cfg: FusionConfig,
    pub weights: FusionWeights<T>,
    pub sigma_head: Option<AdaptiveSigmaHead<T>>,
    grid: (usize, usize),
    dist: Tensor<T>,
    prior: Tensor<T>,
}

impl<T: Real> FusionModule<T> {
    pub fn new(cfg: FusionConfig, grid: (usize, usize), dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = FusionWeights::init(dim, &mut rng);
        let sigma_head = cfg.locality.adaptive.then(|| {
            let mut h = AdaptiveSigmaHead::init(dim, &mut rng);
            h.projection.set_requires_grad(true);
            h.bias.set_requires_grad(true);
            h
        });
        Self::from_parts(cfg, grid, weights, sigma_head)
    }

    pub fn from_parts(
        cfg: FusionConfig,
        grid: (usize, usize),
        weights: FusionWeights<T>,
        sigma_head: Option<AdaptiveSigmaHead<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if cfg.locality.adaptive != sigma_head.is_some() {
            return Err(Error::Config(
                "an adaptive sigma head is required exactly when locality.adaptive is set".into(),
            ));
        }
        if let Some(h) = &sigma_head {
            if h.dim() != weights.dim() {
                return Err(Error::dim(
                    "sigma_head",
                    h.projection.shape(),
                    &[weights.dim(), 1],
                ));
            }
        }
        Ok(FusionModule {
            cfg,
            weights,
            sigma_head,
            grid,
            dist: distance_table(grid.0, grid.1),
            prior: PriorTable::new(grid.0, grid.1, &cfg.locality)?.table,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn layout(&self) -> CanvasLayout {
        CanvasLayout::new(self.grid.0, self.grid.1)
    }

    /// Changes σ (and the cached prior table) in place.
    pub fn set_sigma(&mut self, sigma: f64) -> Result<()> {
        let mut loc = self.cfg.locality;
        loc.sigma = sigma;
        self.prior = PriorTable::new(self.grid.0, self.grid.1, &loc)?.table;
        self.cfg.locality = loc;
        Ok(())
    }

    /// Trainable tensors with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = WEIGHT_NAMES
            .iter()
            .zip(self.weights.tensors())
            .map(|(n, t)| (String::from(*n), t))
            .collect();
        if let Some(h) = &self.sigma_head {
            out.push(("sigma_head.projection".into(), &h.projection));
            out.push(("sigma_head.bias".into(), &h.bias));
        }
        out
    }

    /// Trainable tensors, same order as [`Self::named_tensors`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.weights.tensors_mut().into_iter().collect();
        if let Some(h) = &mut self.sigma_head {
            out.push(&mut h.projection);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Result<FusionModule<U>> {
        FusionModule::from_parts(
            self.cfg,
            self.grid,
            self.weights.cast(),
            self.sigma_head.as_ref().map(|h| h.cast()),
        )
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> FusionVars {
        let w = &self.weights;
        FusionVars {
            w_q: tape.leaf(&w.w_q),
            w_k: tape.leaf(&w.w_k),
            w_vx: tape.leaf(&w.w_vx),
            w_vy: tape.leaf(&w.w_vy),
            sa: [
                tape.leaf(&w.sa_q),
                tape.leaf(&w.sa_k),
                tape.leaf(&w.sa_v),
                tape.leaf(&w.sa_o),
            ],
            sigma_head: self
                .sigma_head
                .as_ref()
                .map(|h| (tape.leaf(&h.projection), tape.leaf(&h.bias))),
        }
    }

    /// Adds this tape's parameter gradients into the module's buffers.
    pub fn accumulate(&mut self, vars: &FusionVars, grads: &Grads<T>) -> Result<()> {
        let handles = [
            vars.w_q, vars.w_k, vars.w_vx, vars.w_vy, vars.sa[0], vars.sa[1], vars.sa[2],
            vars.sa[3],
        ];
        for (t, v) in self.weights.tensors_mut().into_iter().zip(handles) {
            grads.accumulate_into(v, t)?;
        }
        if let (Some(h), Some((p, b))) = (&mut self.sigma_head, vars.sigma_head) {
            grads.accumulate_into(p, &mut h.projection)?;
            grads.accumulate_into(b, &mut h.bias)?;
        }
        Ok(())
    }

    /// Parameter gradients of one tape, in [`Self::params_mut`] order.
    pub fn collect_grads(&self, vars: &FusionVars, grads: &Grads<T>) -> Vec<Vec<T>> {
        let mut handles = vec![vars.w_q, vars.w_k, vars.w_vx, vars.w_vy];
        handles.extend(vars.sa);
        if let Some((p, b)) = vars.sigma_head {
            handles.extend([p, b]);
        }
        let shapes: Vec<usize> = self.named_tensors().iter().map(|(_, t)| t.len()).collect();
        handles
            .iter()
            .zip(shapes)
            .map(|(&v, n)| {
                grads
                    .get(v)
                    .map_or_else(|| vec![T::zero(); n], <[T]>::to_vec)
            })
            .collect()
    }

    fn check_prompts(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::EmptyPrompts);
        }
        Ok(())
    }

    /// σ node for the adaptive head, computed from query embeddings.
    fn sigma_tape(&self, tape: &mut Tape<T>, vars: &FusionVars, eq: Var) -> Result<Option<Var>> {
        let Some((p, b)) = vars.sigma_head else {
            return Ok(None);
        };
        let m = tape.mean_rows(eq)?;
        let z = linear(tape, m, p, b)?;
        Ok(Some(tape.sigmoid(z)?))
    }

    /// Shared self-alignment with residual.
    pub fn self_align_tape(&self, tape: &mut Tape<T>, vars: &FusionVars, x: Var) -> Result<Var> {
        let [q, k, v, o] = vars.sa;
        let a = self_attention(tape, x, q, k, v, o)?;
        tape.add(x, a)
    }

    /// Attention `[L × N·L]` of aligned query features `fq [L×D]` over
    /// stacked aligned prompt-image features `fx [N·L × D]`.
    pub fn attention_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &FusionVars,
        fq: Var,
        fx: Var,
        n: usize,
        sigma: Option<Var>,
    ) -> Result<Var> {
        self.check_prompts(n)?;
        let l = self.grid.0 * self.grid.1;
        let (fq_shape, fx_shape) = (
            tape.value(fq).shape().to_vec(),
            tape.value(fx).shape().to_vec(),
        );
        if fq_shape[0] != l || fx_shape[0] != n * l || fq_shape[1] != fx_shape[1] {
            return Err(Error::dim("locality_attention", &fq_shape, &fx_shape));
        }
        let q = tape.matmul(fq, vars.w_q)?;
        let k = tape.matmul(fx, vars.w_k)?;
        let scores = tape.matmul_bt(q, k)?;
        let scores = tape.scale(scores, T::one() / T::of(self.dim() as f64).sqrt())?;
        let scores = match sigma {
            Some(s) => {
                let psi = tape.locality_prior(s, &self.dist, self.cfg.locality.kind)?;
                let psi = tape.tile_cols(psi, n)?;
                tape.mul(scores, psi)?
            }
            None => {
                let psi = tile(&self.prior, n);
                tape.mul_const(scores, &psi)?
            }
        };
        let scores = if self.cfg.patchwise {
            let mask = Tensor::from_fn(&[l, n * l], |i| {
                if (i / (n * l)) == (i % (n * l)) % l {
                    T::zero()
                } else {
                    T::of(MASKED_SCORE)
                }
            });
            tape.add_const(scores, &mask)?
        } else {
            scores
        };
        tape.softmax(scores)
    }

    /// Full fusion forward on a tape. Backbone tensors are bound by the
    /// caller; they are expected to be frozen.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &FusionVars,
        backbone: &Backbone<T>,
        bvars: &BackboneVars,
        query: &Image,
        prompts: &[&PromptPair],
    ) -> Result<FusionTape> {
        self.check_prompts(prompts.len())?;
        if (backbone.cfg.grid_h, backbone.cfg.grid_w) != self.grid || backbone.cfg.dim != self.dim()
        {
            return Err(Error::dim(
                "fusion_forward",
                &[self.grid.0, self.grid.1, self.dim()],
                &[backbone.cfg.grid_h, backbone.cfg.grid_w, backbone.cfg.dim],
            ));
        }
        let eq = backbone.embed_tape(tape, bvars, query)?;
        let fq = self.self_align_tape(tape, vars, eq)?;
        let mut xs = Vec::with_capacity(prompts.len());
        let mut ys = Vec::with_capacity(prompts.len());
        for p in prompts {
            let ex = backbone.embed_tape(tape, bvars, &p.image)?;
            xs.push(self.self_align_tape(tape, vars, ex)?);
            let ey = backbone.embed_tape(tape, bvars, &p.label)?;
            ys.push(self.self_align_tape(tape, vars, ey)?);
        }
        let fx_all = tape.concat_rows(&xs)?;
        let fy_all = tape.concat_rows(&ys)?;
        let sigma = self.sigma_tape(tape, vars, eq)?;
        let attention = self.attention_tape(tape, vars, fq, fx_all, prompts.len(), sigma)?;
        let (fx, fy) = self.fuse_tape(tape, vars, attention, fx_all, fy_all)?;
        Ok(FusionTape {
            eq,
            fq,
            fx,
            fy,
            attention,
            sigma,
        })
    }

    pub fn fuse_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &FusionVars,
        attention: Var,
        fx: Var,
        fy: Var,
    ) -> Result<(Var, Var)> {
        if tape.value(fx).shape() != tape.value(fy).shape() {
            return Err(Error::dim(
                "fuse",
                tape.value(fx).shape(),
                tape.value(fy).shape(),
            ));
        }
        let vx = tape.matmul(fx, vars.w_vx)?;
        let vy = tape.matmul(fy, vars.w_vy)?;
        Ok((tape.matmul(attention, vx)?, tape.matmul(attention, vy)?))
    }

    /// Eager self-alignment of one `[cells × D]` grid.
    pub fn self_align(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(features.clone());
        let y = self.self_align_tape(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Eager attention over per-prompt image features (each `[L×D]`), with
    /// the module's fixed σ (or `sigma` when given).
    pub fn locality_attention(
        &self,
        fq: &Tensor<T>,
        fx_prompts: &[Tensor<T>],
        sigma: Option<T>,
    ) -> Result<AttentionRecord<T>> {
        self.check_prompts(fx_prompts.len())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let q = tape.constant(fq.clone());
        let xs: Vec<Var> = fx_prompts
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let fx = tape.concat_rows(&xs)?;
        let s = sigma.map(|s| tape.constant(Tensor::scalar(s)));
        let a = self.attention_tape(&mut tape, &vars, q, fx, fx_prompts.len(), s)?;
        Ok(self.record(tape.value(a).clone(), fx_prompts.len()))
    }

    /// Eager fusion of value streams under a given attention record.
    pub fn fuse(
        &self,
        a: &AttentionRecord<T>,
        fx_prompts: &[Tensor<T>],
        fy_prompts: &[Tensor<T>],
    ) -> Result<FusedPrompt<T>> {
        if fx_prompts.len() != a.num_prompts || fy_prompts.len() != a.num_prompts {
            return Err(Error::dim(
                "fuse",
                &[a.num_prompts],
                &[fx_prompts.len(), fy_prompts.len()],
            ));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let att = tape.constant(a.weights.clone());
        let xs: Vec<Var> = fx_prompts
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let ys: Vec<Var> = fy_prompts
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let fx = tape.concat_rows(&xs)?;
        let fy = tape.concat_rows(&ys)?;
        if tape.value(att).cols() != tape.value(fx).rows() {
            return Err(Error::dim(
                "fuse",
                a.weights.shape(),
                tape.value(fx).shape(),
            ));
        }
        let (x, y) = self.fuse_tape(&mut tape, &vars, att, fx, fy)?;
        Ok(FusedPrompt {
            fx: tape.value(x).clone(),
            fy: tape.value(y).clone(),
        })
    }

    /// Eager end-to-end forward.
    pub fn forward(
        &self,
        backbone: &Backbone<T>,
        query: &Image,
        prompts: &[&PromptPair],
    ) -> Result<FusionOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let bvars = backbone.bind(&mut tape);
        let out = self.forward_tape(&mut tape, &vars, backbone, &bvars, query, prompts)?;
        self.output(&tape, &out, prompts.len())
    }

    pub(crate) fn output(
        &self,
        tape: &Tape<T>,
        out: &FusionTape,
        n: usize,
    ) -> Result<FusionOutput<T>> {
        let sigma = match out.sigma {
            Some(s) => tape.value(s).item()?,
            None => T::of(self.cfg.locality.sigma),
        };
        Ok(FusionOutput {
            fused: FusedPrompt {
                fx: tape.value(out.fx).clone(),
                fy: tape.value(out.fy).clone(),
            },
            fq: tape.value(out.fq).clone(),
            attention: self.record(tape.value(out.attention).clone(), n),
            sigma,
        })
    }

    fn record(&self, weights: Tensor<T>, n: usize) -> AttentionRecord<T> {
        AttentionRecord {
            grid: self.grid,
            num_prompts: n,
            weights,
        }
    }
}

/// `[L×L] -> [L × n·L]`, repeating each row `n` times horizontally.
fn tile<T: Real>(t: &Tensor<T>, n: usize) -> Tensor<T> {
    let (rows, cols) = (t.rows(), t.cols());
    Tensor::from_fn(&[rows, n * cols], |i| {
        let (r, c) = (i / (n * cols), i % (n * cols));
        t.data()[r * cols + c % cols]
    })
}

/// Canvas stack on a tape: `[fx; fy; fq; mask]` permuted to canvas order.
pub fn assemble_canvas_tape<T: Real>(
    tape: &mut Tape<T>,
    layout: CanvasLayout,
    fx: Var,
    fy: Var,
    fq: Var,
    mask: Var,
) -> Result<Var> {
    let l = layout.cells();
    for v in [fx, fy, fq, mask] {
        if tape.value(v).rows() != l {
            return Err(Error::dim("assemble_canvas", tape.value(v).shape(), &[l]));
        }
    }
    let stack = tape.concat_rows(&[fx, fy, fq, mask])?;
    tape.gather_rows(stack, &layout.assemble_permutation())
}

/// `[4L × D]` canvas `[F_Xf, F_Yf; F_Xq, mask]` in canvas row-major order.
pub fn assemble_canvas<T: Real>(
    layout: CanvasLayout,
    fused: &FusedPrompt<T>,
    fq: &Tensor<T>,
    mask_token: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = fq.cols();
    if mask_token.len() != d {
        return Err(Error::dim("assemble_canvas", mask_token.shape(), &[d]));
    }
    let mut tape = Tape::new();
    let [x, y, q] = [&fused.fx, &fused.fy, fq].map(|t| tape.constant(t.clone()));
    let m = tape.constant(mask_token.clone().reshape(&[1, d])?);
    let m = tape.gather_rows(m, &vec![0; layout.cells()])?;
    let c = assemble_canvas_tape(&mut tape, layout, x, y, q, m)?;
    Ok(tape.value(c).clone())
}
