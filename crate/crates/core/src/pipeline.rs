//! End-to-end composition: fuse prompts, assemble the canvas, run the
//! frozen encoder, score or decode.

use alloc::vec::Vec;

use crate::backbone::{argmax, Backbone, IndexGrid};
use crate::canvas::Quadrant;
use crate::data::{Image, PromptDatabase, PromptPair};
use crate::error::Result;
use crate::fusion::{assemble_canvas_tape, FusionModule, FusionOutput, FusionVars};
use crate::losses::{objective_tape, CanvasLogits, LossReport, LossTargets, LossVars, LossWeights};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Discrete targets from the query pair's canvas `[X_q, Y_q; X_q, Y_q]`.
pub fn loss_targets<T: Real>(backbone: &Backbone<T>, query: &PromptPair) -> Result<LossTargets> {
    let [tl, tr, _, br] =
        backbone.canvas_tokens(&query.image, &query.label, &query.image, &query.label)?;
    Ok(LossTargets {
        prompt_x: tl,
        prompt_y: tr,
        answer: br,
    })
}

struct Graph {
    fvars: FusionVars,
    fusion: crate::fusion::FusionTape,
    logits: Var,
    blocks: CanvasLogits,
}

fn build<T: Real>(
    tape: &mut Tape<T>,
    backbone: &Backbone<T>,
    fusion: &FusionModule<T>,
    query: &Image,
    prompts: &[&PromptPair],
) -> Result<Graph> {
    let fvars = fusion.bind(tape);
    let bvars = backbone.bind(tape);
    let out = fusion.forward_tape(tape, &fvars, backbone, &bvars, query, prompts)?;
    let mask = backbone.mask_tape(tape, &bvars)?;
    let layout = backbone.layout();
    let canvas = assemble_canvas_tape(tape, layout, out.fx, out.fy, out.fq, mask)?;
    let logits = backbone.encode_tape(tape, &bvars, canvas)?;
    let [x, y, q, m] = Quadrant::ALL.map(|quad| layout.quadrant_rows(quad));
    let blocks = CanvasLogits {
        fused_x: tape.gather_rows(logits, &x)?,
        fused_y: tape.gather_rows(logits, &y)?,
        query_x: tape.gather_rows(logits, &q)?,
        masked: tape.gather_rows(logits, &m)?,
    };
    Ok(Graph {
        fvars,
        fusion: out,
        logits,
        blocks,
    })
}

fn losses<T: Real>(
    tape: &mut Tape<T>,
    backbone: &Backbone<T>,
    fusion: &FusionModule<T>,
    query: &Image,
    prompts: &[&PromptPair],
    targets: &LossTargets,
    weights: &LossWeights,
) -> Result<(Graph, LossVars)> {
    let g = build(tape, backbone, fusion, query, prompts)?;
    let l = objective_tape(tape, g.blocks, targets, weights)?;
    Ok((g, l))
}

/// Loss values of one example without a backward pass.
pub fn objective<T: Real>(
    backbone: &Backbone<T>,
    fusion: &FusionModule<T>,
    query: &Image,
    prompts: &[&PromptPair],
    targets: &LossTargets,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let (_, l) = losses(
        &mut tape, backbone, fusion, query, prompts, targets, weights,
    )?;
    Ok(l.report(&tape))
}

/// Loss values and fusion-parameter gradients of one example. Gradients
/// come back in [`FusionModule::params_mut`] order.
pub fn example_gradients<T: Real>(
    backbone: &Backbone<T>,
    fusion: &FusionModule<T>,
    query: &Image,
    prompts: &[&PromptPair],
    targets: &LossTargets,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let (g, l) = losses(
        &mut tape, backbone, fusion, query, prompts, targets, weights,
    )?;
    let report = l.report(&tape);
    let grads = tape.backward(l.total)?;
    Ok((report, fusion.collect_grads(&g.fvars, &grads)))
}

/// Output of one inference pass.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// Argmax tokens of the answer quadrant.
    pub tokens: IndexGrid,
    /// Decoded answer quadrant, same size as the query.
    pub label: Image,
    pub fusion: FusionOutput<T>,
    /// `[4L × N_c]` canvas logits in canvas order.
    pub logits: Tensor<T>,
}

impl<T: Real> Prediction<T> {
    /// Decoded argmax tokens of one canvas quadrant.
    pub fn decode_quadrant(&self, backbone: &Backbone<T>, q: Quadrant) -> Result<Image> {
        backbone.decode(&argmax_grid(backbone, &self.logits, q))
    }
}

fn argmax_grid<T: Real>(backbone: &Backbone<T>, logits: &Tensor<T>, q: Quadrant) -> IndexGrid {
    let layout = backbone.layout();
    IndexGrid {
        grid_h: layout.grid_h,
        grid_w: layout.grid_w,
        indices: layout
            .quadrant_rows(q)
            .iter()
            .map(|&r| argmax(logits.row(r)))
            .collect(),
    }
}

/// Runs the model on an explicit prompt list.
pub fn predict<T: Real>(
    backbone: &Backbone<T>,
    fusion: &FusionModule<T>,
    query: &Image,
    prompts: &[&PromptPair],
) -> Result<Prediction<T>> {
    let mut tape = Tape::new();
    let g = build(&mut tape, backbone, fusion, query, prompts)?;
    let logits = tape.value(g.logits).clone();
    let tokens = argmax_grid(backbone, &logits, Quadrant::Answer);
    let label = backbone.decode(&tokens)?;
    Ok(Prediction {
        tokens,
        label,
        fusion: fusion.output(&tape, &g.fusion, prompts.len())?,
        logits,
    })
}

/// Retrieves the top-N prompts for `query` (N from the fusion config,
/// skipping `exclude`) and predicts. No prompt substitution happens here.
pub fn infer<T: Real>(
    backbone: &Backbone<T>,
    fusion: &FusionModule<T>,
    db: &PromptDatabase,
    query: &Image,
    exclude: Option<u32>,
) -> Result<Prediction<T>> {
    let ranked = db.retrieve_ranked(query, fusion.cfg.num_prompts, exclude)?;
    let prompts: Vec<&PromptPair> = ranked.iter().map(|r| db.get(r.index)).collect();
    predict(backbone, fusion, query, &prompts)
}
