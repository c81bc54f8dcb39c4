//! Small building blocks shared by the fusion module and the backbone.

use crate::error::Result;
use crate::real::Real;
use crate::tensor::{Tape, Var};

/// Single-head scaled dot-product self-attention over the rows of `x`,
/// followed by the output projection. No residual.
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Result<Var> {
    let d = tape.value(wq).shape()[1];
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let scores = tape.matmul_bt(q, k)?;
    let scores = tape.scale(scores, T::one() / T::of(d as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let mixed = tape.matmul(attn, v)?;
    tape.matmul(mixed, wo)
}

/// `x·w + b`
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}
