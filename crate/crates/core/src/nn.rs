//! Named layers on top of the tape: linear, layer norm, multi-head attention,
//! pre-norm transformer blocks and bottleneck adapters.
//!
//! Every layer looks its weights up by a dot-separated prefix, e.g. the query
//! projection of block 0 lives at `image.blocks.0.attn.q.weight`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) {
    let std = (1.0 / d_in as f64).sqrt();
    params.insert(
        format!("{prefix}.weight"),
        Tensor::randn(&[d_in, d_out], std, rng),
        true,
    );
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]), true);
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.weight"), Tensor::filled(&[dim], 1.0), true);
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]), true);
}

/// Shape of one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

pub fn init_block<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, s: BlockShape, rng: &mut R) {
    init_layer_norm(params, &format!("{prefix}.ln1"), s.dim);
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.attn.{proj}"), s.dim, s.dim, rng);
    }
    init_layer_norm(params, &format!("{prefix}.ln2"), s.dim);
    init_linear(params, &format!("{prefix}.mlp.fc1"), s.dim, s.mlp_hidden, rng);
    init_linear(params, &format!("{prefix}.mlp.fc2"), s.mlp_hidden, s.dim, rng);
}

pub fn linear<'p>(tape: &mut Tape<'p>, params: &'p ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.bind(params, &format!("{prefix}.weight"))?;
    let b = tape.bind(params, &format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

pub fn layer_norm<'p>(tape: &mut Tape<'p>, params: &'p ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.bind(params, &format!("{prefix}.weight"))?;
    let b = tape.bind(params, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Q/K/V projections, per-head scaled dot-product attention, output projection.
/// `x` holds `batch` sequences of `seq` tokens stacked as rows.
pub fn multi_head_attention<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, params, &format!("{prefix}.q"), x)?;
    let k = linear(tape, params, &format!("{prefix}.k"), x)?;
    let v = linear(tape, params, &format!("{prefix}.v"), x)?;
    let a = tape.attention(q, k, v, batch, seq, heads)?;
    linear(tape, params, &format!("{prefix}.o"), a)
}

/// Pre-norm block: `h = x + MHA(LN(x))`, `y = h + MLP(LN(h))`, then an
/// optional residual bottleneck adapter on `y`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    with_adapter: bool,
) -> Result<Var> {
    let n1 = layer_norm(tape, params, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(tape, params, &format!("{prefix}.attn"), n1, batch, seq, heads)?;
    let h = tape.add(x, a)?;
    let n2 = layer_norm(tape, params, &format!("{prefix}.ln2"), h)?;
    let f1 = linear(tape, params, &format!("{prefix}.mlp.fc1"), n2)?;
    let act = tape.gelu(f1);
    let f2 = linear(tape, params, &format!("{prefix}.mlp.fc2"), act)?;
    let y = tape.add(h, f2)?;
    if with_adapter {
        adapter(tape, params, &format!("{prefix}.adapter"), y)
    } else {
        Ok(y)
    }
}

/// `y = x + up(GELU(down(x)))`.
pub fn adapter<'p>(tape: &mut Tape<'p>, params: &'p ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let down = linear(tape, params, &format!("{prefix}.down"), x)?;
    let act = tape.gelu(down);
    let up = linear(tape, params, &format!("{prefix}.up"), act)?;
    tape.add(x, up)
}

/// Adapter weights: normal down-projection, zero up-projection, so a fresh
/// adapter is the identity map.
pub fn init_adapter<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    bottleneck: usize,
    rng: &mut R,
) {
    init_linear(params, &format!("{prefix}.down"), dim, bottleneck, rng);
    params.insert(
        format!("{prefix}.up.weight"),
        Tensor::zeros(&[bottleneck, dim]),
        true,
    );
    params.insert(format!("{prefix}.up.bias"), Tensor::zeros(&[dim]), true);
}
