//! Incremental inference with bounded state.
//!
//! The detector consumes feature frames in arbitrary-size chunks and emits
//! one posterior per `P` consumed frames. All per-position arithmetic goes
//! through the same kernels as the batch path, in the same order, so
//! streaming and batch outputs agree to floating-point identity.

use std::collections::VecDeque;

use super::forward::LN_EPS;
use super::{AttentionParams, FfnParams, ModelConfig, ModelParams, Projection};
use crate::error::{Error, Result};
use crate::kernels::{self, Pad2d, PadKind};
use crate::tensor::{matmul_acc, Real};

/// Rolling state of one conv front-end stage: the last `kt − 1` input
/// time-slices, each `[cin, f]`, zero-initialized like the causal padding.
#[derive(Debug, Clone, PartialEq)]
struct ConvStageState<T> {
    history: VecDeque<Vec<T>>,
    cin: usize,
    flen: usize,
}

/// Rolling state of one encoder block.
#[derive(Debug, Clone, PartialEq)]
struct BlockState<T> {
    /// Last `b` block inputs (pre-norm vectors), oldest first.
    attn_window: VecDeque<Vec<T>>,
    /// Last `kernel − 1` inner feedforward activations for the causal
    /// depthwise convolution. Empty when the feedforward is dense.
    ffn_history: VecDeque<Vec<T>>,
}

/// Streaming replica of the batch forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingDetector<T: Real> {
    params: ModelParams<T>,
    conv_stages: Vec<ConvStageState<T>>,
    blocks: Vec<BlockState<T>>,
    /// Feature frames awaiting a full group of `P`.
    pending: Vec<T>,
    frames_consumed: usize,
    steps_emitted: usize,
}

impl<T: Real> StreamingDetector<T> {
    pub fn new(params: ModelParams<T>) -> Result<Self> {
        params.config.validate()?;
        if params.config.look_ahead != 0 {
            return Err(Error::Config(
                "streaming inference requires look_ahead = 0".into(),
            ));
        }
        let mut det = StreamingDetector {
            params,
            conv_stages: Vec::new(),
            blocks: Vec::new(),
            pending: Vec::new(),
            frames_consumed: 0,
            steps_emitted: 0,
        };
        det.reset();
        Ok(det)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    /// Clear all rolling state; the next frame starts a fresh stream.
    pub fn reset(&mut self) {
        let cfg = &self.params.config;
        let (kt, _) = cfg.conv_kernel;
        let mut flen = cfg.feature_dim;
        self.conv_stages = (0..cfg.conv_blocks)
            .map(|i| {
                let cin = if i == 0 { 1 } else { cfg.conv_channels };
                let state = ConvStageState {
                    history: VecDeque::from(vec![vec![T::zero(); cin * flen]; kt - 1]),
                    cin,
                    flen,
                };
                flen /= cfg.pool.1;
                state
            })
            .collect();
        self.blocks = (0..cfg.attn_blocks)
            .map(|_| BlockState {
                attn_window: VecDeque::new(),
                ffn_history: if cfg.use_group_separable {
                    VecDeque::from(vec![vec![T::zero(); cfg.ffn_dim]; 2])
                } else {
                    VecDeque::new()
                },
            })
            .collect();
        self.pending.clear();
        self.frames_consumed = 0;
        self.steps_emitted = 0;
    }

    pub fn frames_consumed(&self) -> usize {
        self.frames_consumed
    }

    pub fn steps_emitted(&self) -> usize {
        self.steps_emitted
    }

    /// Feed feature frames (flat `[n, F]` row-major); returns the newly
    /// produced posteriors, one per `P` consumed frames.
    pub fn push_frames(&mut self, frames: &[T]) -> Result<Vec<T>> {
        let f = self.params.config.feature_dim;
        if frames.len() % f != 0 {
            return Err(Error::Usage(format!(
                "frame chunk of {} values is not a multiple of the feature dim {f}",
                frames.len()
            )));
        }
        self.pending.extend_from_slice(frames);
        let p = self.params.config.step_size();
        let mut posteriors = Vec::new();
        while self.pending.len() >= p * f {
            let group: Vec<T> = self.pending.drain(..p * f).collect();
            let vec = self.frontend_step(&group);
            let score = self.encoder_step(vec)?;
            posteriors.push(score);
            self.frames_consumed += p;
            self.steps_emitted += 1;
        }
        Ok(posteriors)
    }

    /// Push one group of `P` raw frames through the conv stages; returns the
    /// projected d-vector for this output step.
    fn frontend_step(&mut self, group: &[T]) -> Vec<T> {
        let StreamingDetector { params, conv_stages, .. } = self;
        let cfg = &params.config;
        let (kt, kf) = cfg.conv_kernel;
        let (pt, pf) = cfg.pool;
        let pad = Pad2d { time: PadKind::Causal, freq: PadKind::Same };
        // stage input: time-slices in [t][cin][f] order
        let mut slices: Vec<Vec<T>> = group
            .chunks_exact(cfg.feature_dim)
            .map(|frame| frame.to_vec()) // cin = 1
            .collect();
        for (stage_idx, stage) in conv_stages.iter_mut().enumerate() {
            let (cin, flen) = (stage.cin, stage.flen);
            let n_new = slices.len();
            let slab_t = (kt - 1) + n_new;
            // assemble slab in [cin, t, f] order from history ++ new slices
            let mut slab = vec![T::zero(); cin * slab_t * flen];
            for (ti, slice) in stage.history.iter().chain(slices.iter()).enumerate() {
                for c in 0..cin {
                    for fi in 0..flen {
                        slab[(c * slab_t + ti) * flen + fi] = slice[c * flen + fi];
                    }
                }
            }
            let w = &params.conv[stage_idx].w;
            let b = &params.conv[stage_idx].b;
            let cout = cfg.conv_channels;
            let mut conv_out = vec![T::zero(); cout * slab_t * flen];
            kernels::conv2d_forward(
                &slab,
                (cin, slab_t, flen),
                w.data(),
                (cout, kt, kf),
                b.data(),
                1,
                pad,
                &mut conv_out,
            );
            // keep the last n_new positions (full history, no pad reliance),
            // apply ReLU, pool time×freq, emit slices for the next stage
            for v in conv_out.iter_mut() {
                *v = v.max(T::zero());
            }
            let fo = flen / pf;
            let mut pooled: Vec<Vec<T>> = Vec::with_capacity(n_new / pt);
            for ot in 0..n_new / pt {
                let mut slice = vec![T::neg_infinity(); cout * fo];
                for c in 0..cout {
                    for of in 0..fo {
                        let mut best = T::neg_infinity();
                        for dt in 0..pt {
                            let ti = (kt - 1) + ot * pt + dt;
                            for df in 0..pf {
                                let v = conv_out[(c * slab_t + ti) * flen + of * pf + df];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        slice[c * fo + of] = best;
                    }
                }
                pooled.push(slice);
            }
            // update history with the last kt−1 raw input slices of this stage
            for slice in &slices {
                stage.history.push_back(slice.clone());
                if stage.history.len() > kt - 1 {
                    stage.history.pop_front();
                }
            }
            slices = pooled;
        }
        debug_assert_eq!(slices.len(), 1);
        // flatten (channel-major, matching the batch flatten) then project
        let flat = slices.pop().expect("one slice per step");
        let d = cfg.model_dim;
        let mut vec = vec![T::zero(); d];
        matmul_acc(&flat, params.proj_w.data(), &mut vec, 1, flat.len(), d);
        for (v, &b) in vec.iter_mut().zip(params.proj_b.data()) {
            *v += b;
        }
        vec
    }

    /// Run one post-frontend vector through every encoder block and the
    /// decoder; updates the rolling windows.
    fn encoder_step(&mut self, mut x: Vec<T>) -> Result<T> {
        let StreamingDetector { params, blocks, .. } = self;
        let cfg = &params.config;
        let d = cfg.model_dim;
        for i in 0..cfg.attn_blocks {
            let attn = if cfg.share_attention { &params.attention[0] } else { &params.attention[i] };
            let block_params = &params.blocks[i];
            let state = &mut blocks[i];

            let attended = attend_window(
                cfg,
                attn,
                block_params.ln_pre.gain.data(),
                block_params.ln_pre.bias.data(),
                &state.attn_window,
                &x,
            );
            // residual + post-norm
            let mut res: Vec<T> = x.iter().zip(&attended).map(|(&a, &b)| a + b).collect();
            let mut after_attn = vec![T::zero(); d];
            kernels::layernorm_row(
                &res,
                block_params.ln_attn.gain.data(),
                block_params.ln_attn.bias.data(),
                T::of(LN_EPS),
                &mut after_attn,
            );

            // the attention window stores the block INPUT
            state.attn_window.push_back(x.clone());
            if state.attn_window.len() > cfg.look_back {
                state.attn_window.pop_front();
            }

            let f = match &block_params.ffn {
                FfnParams::GroupSeparable { pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b } => {
                    let mut inner = vec![T::zero(); cfg.ffn_dim];
                    kernels::conv1d_forward(
                        &after_attn,
                        (1, d),
                        pw1_w.data(),
                        (cfg.ffn_dim, 1),
                        pw1_b.data(),
                        cfg.ffn_groups,
                        PadKind::Causal,
                        &mut inner,
                    );
                    for v in inner.iter_mut() {
                        *v = v.max(T::zero());
                    }
                    // causal depthwise over time: slab of kernel−1 history + now
                    let k = dw_w.shape()[2];
                    let mut slab = Vec::with_capacity(k * cfg.ffn_dim);
                    for h in state.ffn_history.iter() {
                        slab.extend_from_slice(h);
                    }
                    slab.extend_from_slice(&inner);
                    let slab_t = state.ffn_history.len() + 1;
                    let mut dw_out = vec![T::zero(); slab_t * cfg.ffn_dim];
                    kernels::conv1d_forward(
                        &slab,
                        (slab_t, cfg.ffn_dim),
                        dw_w.data(),
                        (cfg.ffn_dim, k),
                        dw_b.data(),
                        cfg.ffn_dim,
                        PadKind::Causal,
                        &mut dw_out,
                    );
                    let current = &dw_out[(slab_t - 1) * cfg.ffn_dim..];
                    state.ffn_history.push_back(inner.clone());
                    if state.ffn_history.len() > k - 1 {
                        state.ffn_history.pop_front();
                    }
                    let mut out = vec![T::zero(); d];
                    kernels::conv1d_forward(
                        current,
                        (1, cfg.ffn_dim),
                        pw2_w.data(),
                        (d, 1),
                        pw2_b.data(),
                        cfg.ffn_groups,
                        PadKind::Causal,
                        &mut out,
                    );
                    out
                }
                FfnParams::Dense { w1, b1, w2, b2 } => {
                    let e = cfg.ffn_dim;
                    let mut inner = vec![T::zero(); e];
                    matmul_acc(&after_attn, w1.data(), &mut inner, 1, d, e);
                    for (v, &b) in inner.iter_mut().zip(b1.data()) {
                        *v = (*v + b).max(T::zero());
                    }
                    let mut out = vec![T::zero(); d];
                    matmul_acc(&inner, w2.data(), &mut out, 1, e, d);
                    for (v, &b) in out.iter_mut().zip(b2.data()) {
                        *v += b;
                    }
                    out
                }
            };
            res = after_attn.iter().zip(&f).map(|(&a, &b)| a + b).collect();
            let mut after_ffn = vec![T::zero(); d];
            kernels::layernorm_row(
                &res,
                block_params.ln_ffn.gain.data(),
                block_params.ln_ffn.bias.data(),
                T::of(LN_EPS),
                &mut after_ffn,
            );
            x = after_ffn;
        }
        // decoder
        let mut logit = vec![T::zero(); 1];
        matmul_acc(&x, params.decoder_w.data(), &mut logit, 1, d, 1);
        Ok(kernels::sigmoid(logit[0] + params.decoder_b.data()[0]))
    }
}

fn project_row<T: Real>(x: &[T], p: &Projection<T>, d: usize) -> Vec<T> {
    match p {
        Projection::LowRank { down, up } => {
            let r = down.shape()[1];
            let mut low = vec![T::zero(); r];
            matmul_acc(x, down.data(), &mut low, 1, d, r);
            let mut out = vec![T::zero(); d];
            matmul_acc(&low, up.data(), &mut out, 1, r, d);
            out
        }
        Projection::Dense { w } => {
            let mut out = vec![T::zero(); d];
            matmul_acc(x, w.data(), &mut out, 1, d, d);
            out
        }
    }
}

/// Windowed multihead attention for the newest position: the query is the
/// current vector, keys/values span the retained window plus the current
/// vector, ascending in time (matching the batch accumulation order).
fn attend_window<T: Real>(
    cfg: &ModelConfig,
    attn: &AttentionParams<T>,
    ln_gain: &[T],
    ln_bias: &[T],
    window: &VecDeque<Vec<T>>,
    current: &[T],
) -> Vec<T> {
    let d = cfg.model_dim;
    let dk = cfg.head_dim();
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let eps = T::of(LN_EPS);

    let mut normed: Vec<Vec<T>> = Vec::with_capacity(window.len() + 1);
    for x in window.iter().map(|v| v.as_slice()).chain(std::iter::once(current)) {
        let mut n = vec![T::zero(); d];
        kernels::layernorm_row(x, ln_gain, ln_bias, eps, &mut n);
        normed.push(n);
    }
    let q = project_row(normed.last().expect("window non-empty"), &attn.q, d);
    let keys: Vec<Vec<T>> = normed.iter().map(|n| project_row(n, &attn.k, d)).collect();
    let vals: Vec<Vec<T>> = normed.iter().map(|n| project_row(n, &attn.v, d)).collect();

    let w_len = keys.len();
    let mut concat = vec![T::zero(); d];
    let mut scores = vec![T::zero(); w_len];
    let mut weights = vec![T::zero(); w_len];
    for h in 0..cfg.heads {
        let lo = h * dk;
        for (j, key) in keys.iter().enumerate() {
            let mut s = T::zero();
            for (qv, kv) in q[lo..lo + dk].iter().zip(&key[lo..lo + dk]) {
                s += *qv * *kv;
            }
            scores[j] = s * scale;
        }
        kernels::softmax_row(&scores, &mut weights);
        let out = &mut concat[lo..lo + dk];
        for (j, val) in vals.iter().enumerate() {
            let wj = weights[j];
            for (o, &vv) in out.iter_mut().zip(&val[lo..lo + dk]) {
                *o += wj * vv;
            }
        }
    }
    let mut projected = vec![T::zero(); d];
    matmul_acc(&concat, attn.out.data(), &mut projected, 1, d, d);
    projected
}
