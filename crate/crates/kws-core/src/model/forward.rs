//! Batch (whole-sequence) forward pass on the autodiff tape.

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::kernels::{Pad2d, PadKind};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Real, Tensor};

/// Attention logits outside the window are filled with this before softmax,
/// which underflows to exactly zero weight.
pub(crate) const MASK_FILL: f64 = -1e30;

/// Layer-norm variance guard.
pub(crate) const LN_EPS: f64 = 1e-5;

/// Tape handles of every parameter tensor, in canonical order.
///
/// With shared attention the single set's ids are handed to every block, so
/// the tape accumulates each block's gradient into the same leaves.
pub struct BoundParams {
    pub ids: Vec<ValueId>,
}

impl BoundParams {
    /// Register every parameter on the tape; `trainable` marks them for
    /// gradient collection.
    pub fn bind<T: Real>(params: &ModelParams<T>, tape: &mut Tape<T>, trainable: bool) -> Self {
        let ids = params
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) })
            .collect();
        BoundParams { ids }
    }
}

/// Walks [`BoundParams`] in the same canonical order the tensors were bound.
struct IdCursor<'a> {
    ids: &'a [ValueId],
    pos: usize,
}

impl<'a> IdCursor<'a> {
    fn next(&mut self) -> ValueId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
}

struct ConvIds {
    w: ValueId,
    b: ValueId,
}

struct ProjIds {
    down: ValueId,
    up: Option<ValueId>,
}

struct AttnIds {
    q: ProjIds,
    k: ProjIds,
    v: ProjIds,
    out: ValueId,
}

struct NormIds {
    gain: ValueId,
    bias: ValueId,
}

enum FfnIds {
    GroupSeparable {
        pw1_w: ValueId,
        pw1_b: ValueId,
        dw_w: ValueId,
        dw_b: ValueId,
        pw2_w: ValueId,
        pw2_b: ValueId,
    },
    Dense { w1: ValueId, b1: ValueId, w2: ValueId, b2: ValueId },
}

struct BlockIds {
    ln_pre: NormIds,
    ln_attn: NormIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

struct LayoutIds {
    conv: Vec<ConvIds>,
    proj_w: ValueId,
    proj_b: ValueId,
    attention: Vec<AttnIds>,
    blocks: Vec<BlockIds>,
    decoder_w: ValueId,
    decoder_b: ValueId,
}

fn layout(cfg: &ModelConfig, bound: &BoundParams) -> LayoutIds {
    let mut cur = IdCursor { ids: &bound.ids, pos: 0 };
    let conv =
        (0..cfg.conv_blocks).map(|_| ConvIds { w: cur.next(), b: cur.next() }).collect();
    let proj_w = cur.next();
    let proj_b = cur.next();
    let attention = (0..cfg.attention_sets())
        .map(|_| {
            let mut proj = || {
                if cfg.use_lrd {
                    ProjIds { down: cur.next(), up: Some(cur.next()) }
                } else {
                    ProjIds { down: cur.next(), up: None }
                }
            };
            let q = proj();
            let k = proj();
            let v = proj();
            AttnIds { q, k, v, out: cur.next() }
        })
        .collect();
    let blocks = (0..cfg.attn_blocks)
        .map(|_| {
            let ln_pre = NormIds { gain: cur.next(), bias: cur.next() };
            let ln_attn = NormIds { gain: cur.next(), bias: cur.next() };
            let ln_ffn = NormIds { gain: cur.next(), bias: cur.next() };
            let ffn = if cfg.use_group_separable {
                FfnIds::GroupSeparable {
                    pw1_w: cur.next(),
                    pw1_b: cur.next(),
                    dw_w: cur.next(),
                    dw_b: cur.next(),
                    pw2_w: cur.next(),
                    pw2_b: cur.next(),
                }
            } else {
                FfnIds::Dense { w1: cur.next(), b1: cur.next(), w2: cur.next(), b2: cur.next() }
            };
            BlockIds { ln_pre, ln_attn, ln_ffn, ffn }
        })
        .collect();
    let decoder_w = cur.next();
    let decoder_b = cur.next();
    debug_assert_eq!(cur.pos, bound.ids.len());
    LayoutIds { conv, proj_w, proj_b, attention, blocks, decoder_w, decoder_b }
}

/// True where attention from step `i` to step `j` is forbidden:
/// `j < i − back` or `j > i + ahead`.
pub fn window_mask(len: usize, back: usize, ahead: usize) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            mask[i * len + j] = j + back < i || j > i + ahead;
        }
    }
    mask
}

/// Front end: conv blocks with causal-time/same-frequency padding, ReLU,
/// pooling; flatten per step; linear projection to the model width.
/// Returns a `[⌊T/P⌋, d]` sequence.
pub fn conv_frontend<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    bound: &BoundParams,
    features: &FeatureSequence<T>,
) -> Result<ValueId> {
    let t = features.num_frames();
    if t < cfg.step_size() {
        return Err(Error::InvalidArgument {
            op: "conv_frontend",
            msg: format!("{t} frames, need at least {} for one output step", cfg.step_size()),
        });
    }
    let ids = layout(cfg, bound);
    let f = features.feature_dim();
    let mut x = tape.leaf(Tensor::new(vec![1, t, f], features.tensor().data().to_vec())?);
    let pad = Pad2d { time: PadKind::Causal, freq: PadKind::Same };
    for conv in &ids.conv {
        let y = tape.conv2d(x, conv.w, conv.b, 1, pad)?;
        let y = tape.relu(y);
        x = tape.maxpool2d(y, cfg.pool)?;
    }
    let flat = tape.flatten_channels(x)?;
    let proj = tape.matmul(flat, ids.proj_w)?;
    tape.add_row_bias(proj, ids.proj_b)
}

fn project<T: Real>(tape: &mut Tape<T>, x: ValueId, p: &ProjIds) -> Result<ValueId> {
    match p.up {
        Some(up) => {
            let low = tape.matmul(x, p.down)?;
            tape.matmul(low, up)
        }
        None => tape.matmul(x, p.down),
    }
}

/// One attention sublayer: pre-norm, low-rank (or dense) Q/K/V, multihead
/// windowed attention, output projection, residual, post-norm.
fn attention_sublayer<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    x: ValueId,
    attn: &AttnIds,
    ln_pre: &NormIds,
    ln_post: &NormIds,
) -> Result<ValueId> {
    let steps = tape.value(x).dims2()?.0;
    let mask = window_mask(steps, cfg.look_back, cfg.look_ahead);
    attention_sublayer_with_mask(tape, cfg, x, attn, ln_pre, ln_post, mask)
}

fn attention_sublayer_with_mask<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    x: ValueId,
    attn: &AttnIds,
    ln_pre: &NormIds,
    ln_post: &NormIds,
    mask: Vec<bool>,
) -> Result<ValueId> {
    let u = tape.layernorm(x, ln_pre.gain, ln_pre.bias, T::of(LN_EPS))?;
    let q = project(tape, u, &attn.q)?;
    let k = project(tape, u, &attn.k)?;
    let v = project(tape, u, &attn.v)?;
    let dk = cfg.head_dim();
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.mul_scalar(scores, scale);
        let scores = tape.masked_fill(scores, mask.clone(), T::of(MASK_FILL))?;
        let weights = tape.softmax_lastdim(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&heads)?;
    let o = tape.matmul(concat, attn.out)?;
    let res = tape.add(x, o)?;
    tape.layernorm(res, ln_post.gain, ln_post.bias, T::of(LN_EPS))
}

/// One feedforward sublayer (group-separable or dense), residual, post-norm.
fn ffn_sublayer<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    x: ValueId,
    ffn: &FfnIds,
    ln_post: &NormIds,
) -> Result<ValueId> {
    let f = match ffn {
        FfnIds::GroupSeparable { pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b } => {
            let inner = tape.conv1d(x, *pw1_w, *pw1_b, cfg.ffn_groups, PadKind::Causal)?;
            let inner = tape.relu(inner);
            let inner = tape.conv1d(inner, *dw_w, *dw_b, cfg.ffn_dim, PadKind::Causal)?;
            tape.conv1d(inner, *pw2_w, *pw2_b, cfg.ffn_groups, PadKind::Causal)?
        }
        FfnIds::Dense { w1, b1, w2, b2 } => {
            let inner = tape.matmul(x, *w1)?;
            let inner = tape.add_row_bias(inner, *b1)?;
            let inner = tape.relu(inner);
            let outer = tape.matmul(inner, *w2)?;
            tape.add_row_bias(outer, *b2)?
        }
    };
    let res = tape.add(x, f)?;
    tape.layernorm(res, ln_post.gain, ln_post.bias, T::of(LN_EPS))
}

/// Full forward pass: front end, N encoder blocks, sigmoid decoder.
/// Returns per-step trigger posteriors shaped `[⌊T/P⌋, 1]`.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params_cfg: &ModelConfig,
    bound: &BoundParams,
    features: &FeatureSequence<T>,
) -> Result<ValueId> {
    let ids = layout(params_cfg, bound);
    let mut x = conv_frontend(tape, params_cfg, bound, features)?;
    for (i, block) in ids.blocks.iter().enumerate() {
        let attn = if params_cfg.share_attention { &ids.attention[0] } else { &ids.attention[i] };
        x = attention_sublayer(tape, params_cfg, x, attn, &block.ln_pre, &block.ln_attn)?;
        x = ffn_sublayer(tape, params_cfg, x, &block.ffn, &block.ln_ffn)?;
    }
    let logits = tape.matmul(x, ids.decoder_w)?;
    let logits = tape.add_row_bias(logits, ids.decoder_b)?;
    Ok(tape.sigmoid(logits))
}

impl<T: Real> ModelParams<T> {
    /// Inference-only forward: posteriors for one feature sequence.
    pub fn forward(&self, features: &FeatureSequence<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(self, &mut tape, false);
        let out = forward_on_tape(&mut tape, &self.config, &bound, features)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Standalone attention sublayer on a `[steps, d]` sequence: pre-norm,
/// windowed multihead attention over `[t − look_back, t + look_ahead]`,
/// output projection, residual, post-norm.
pub fn attention_block<T: Real>(
    x: &Tensor<T>,
    attn: &super::AttentionParams<T>,
    ln_pre: &super::NormParams<T>,
    ln_post: &super::NormParams<T>,
    heads: usize,
    look_back: usize,
    look_ahead: usize,
) -> Result<Tensor<T>> {
    let (_, d) = x.dims2()?;
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let mut tape = Tape::new();
    let bind_proj = |tape: &mut Tape<T>, p: &super::Projection<T>| match p {
        super::Projection::LowRank { down, up } => {
            ProjIds { down: tape.leaf(down.clone()), up: Some(tape.leaf(up.clone())) }
        }
        super::Projection::Dense { w } => ProjIds { down: tape.leaf(w.clone()), up: None },
    };
    let xid = tape.leaf(x.clone());
    let ids = AttnIds {
        q: bind_proj(&mut tape, &attn.q),
        k: bind_proj(&mut tape, &attn.k),
        v: bind_proj(&mut tape, &attn.v),
        out: tape.leaf(attn.out.clone()),
    };
    let pre = NormIds { gain: tape.leaf(ln_pre.gain.clone()), bias: tape.leaf(ln_pre.bias.clone()) };
    let post =
        NormIds { gain: tape.leaf(ln_post.gain.clone()), bias: tape.leaf(ln_post.bias.clone()) };
    // only heads and model_dim are read through the config here, so a
    // look_back of 0 (legal for this op, not for full configs) works via
    // the explicit mask
    let cfg = ModelConfig { heads, model_dim: d, ..ModelConfig::default() };
    let steps = x.dims2()?.0;
    let out = attention_sublayer_with_mask(
        &mut tape,
        &cfg,
        xid,
        &ids,
        &pre,
        &post,
        window_mask(steps, look_back, look_ahead),
    )?;
    Ok(tape.value(out).clone())
}

/// Standalone feedforward sublayer on a `[steps, d]` sequence: the grouped or
/// dense transform, residual, post-norm.
pub fn ffn_block<T: Real>(
    x: &Tensor<T>,
    ffn: &super::FfnParams<T>,
    ln_post: &super::NormParams<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let (ids, ffn_dim) = match ffn {
        super::FfnParams::GroupSeparable { pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b } => (
            FfnIds::GroupSeparable {
                pw1_w: tape.leaf(pw1_w.clone()),
                pw1_b: tape.leaf(pw1_b.clone()),
                dw_w: tape.leaf(dw_w.clone()),
                dw_b: tape.leaf(dw_b.clone()),
                pw2_w: tape.leaf(pw2_w.clone()),
                pw2_b: tape.leaf(pw2_b.clone()),
            },
            pw1_w.shape()[0],
        ),
        super::FfnParams::Dense { w1, b1, w2, b2 } => (
            FfnIds::Dense {
                w1: tape.leaf(w1.clone()),
                b1: tape.leaf(b1.clone()),
                w2: tape.leaf(w2.clone()),
                b2: tape.leaf(b2.clone()),
            },
            w1.shape()[1],
        ),
    };
    let post =
        NormIds { gain: tape.leaf(ln_post.gain.clone()), bias: tape.leaf(ln_post.bias.clone()) };
    let cfg = ModelConfig {
        ffn_groups: groups,
        ffn_dim,
        model_dim: x.dims2()?.1,
        ..ModelConfig::default()
    };
    let out = ffn_sublayer(&mut tape, &cfg, xid, &ids, &post)?;
    Ok(tape.value(out).clone())
}
