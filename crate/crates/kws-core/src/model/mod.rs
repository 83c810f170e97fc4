//! The compact encoder: causal convolutional front end, windowed
//! self-attention blocks with cross-layer-shared low-rank projections,
//! group-separable feedforward, and a per-step sigmoid decoder.

mod forward;
mod streaming;

pub use forward::{
    attention_block, conv_frontend, ffn_block, forward_on_tape, window_mask, BoundParams,
};
pub use streaming::StreamingDetector;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Convolutional front-end blocks (conv + ReLU + pool).
    pub conv_blocks: usize,
    /// Attention/feedforward encoder blocks.
    pub attn_blocks: usize,
    /// Model and attention width d.
    pub model_dim: usize,
    /// Bottleneck rank r of the low-rank Q/K/V projections.
    pub lrd_rank: usize,
    pub heads: usize,
    /// Groups of the two pointwise feedforward convolutions.
    pub ffn_groups: usize,
    /// Inner feedforward width.
    pub ffn_dim: usize,
    /// Attention look-back steps b.
    pub look_back: usize,
    /// Attention look-ahead steps h (0 keeps the model causal).
    pub look_ahead: usize,
    pub conv_channels: usize,
    pub conv_kernel: (usize, usize),
    pub pool: (usize, usize),
    /// Input feature dimension F.
    pub feature_dim: usize,
    /// One attention parameter set referenced by every block.
    pub share_attention: bool,
    /// Low-rank Q/K/V projections (dense when false).
    pub use_lrd: bool,
    /// Group-separable feedforward (two dense layers when false).
    pub use_group_separable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_blocks: 2,
            attn_blocks: 3,
            model_dim: 64,
            lrd_rank: 16,
            heads: 4,
            ffn_groups: 4,
            // tuned once against the parameter budget and frozen
            ffn_dim: 384,
            look_back: 60,
            look_ahead: 0,
            conv_channels: 32,
            conv_kernel: (3, 3),
            pool: (2, 2),
            feature_dim: 40,
            share_attention: true,
            use_lrd: true,
            use_group_separable: true,
        }
    }
}

impl ModelConfig {
    /// A small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            conv_blocks: 2,
            attn_blocks: 2,
            model_dim: 8,
            lrd_rank: 4,
            heads: 2,
            ffn_groups: 2,
            ffn_dim: 16,
            look_back: 4,
            look_ahead: 0,
            conv_channels: 4,
            feature_dim: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        c(self.conv_blocks >= 1, "at least one conv block required".into())?;
        c(self.attn_blocks >= 1, "at least one attention block required".into())?;
        c(self.heads >= 1, "at least one head required".into())?;
        c(
            self.model_dim % self.heads == 0,
            format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads),
        )?;
        c(
            self.lrd_rank >= 1 && self.lrd_rank <= self.model_dim,
            format!("lrd_rank {} outside [1, {}]", self.lrd_rank, self.model_dim),
        )?;
        c(
            self.ffn_groups >= 1
                && self.ffn_dim % self.ffn_groups == 0
                && self.model_dim % self.ffn_groups == 0,
            format!(
                "ffn_groups {} must divide ffn_dim {} and model_dim {}",
                self.ffn_groups, self.ffn_dim, self.model_dim
            ),
        )?;
        c(self.look_back >= 1, "look_back must be ≥ 1".into())?;
        c(
            self.conv_kernel.0 >= 1 && self.conv_kernel.1 >= 1,
            "conv kernel extents must be ≥ 1".into(),
        )?;
        c(self.pool.0 >= 1 && self.pool.1 >= 1, "pool extents must be ≥ 1".into())?;
        c(
            self.frontend_freq_dim() >= 1,
            format!(
                "feature_dim {} pools away to nothing over {} blocks",
                self.feature_dim, self.conv_blocks
            ),
        )?;
        Ok(())
    }

    /// Input frames consumed per output step (P): time pooling across blocks.
    pub fn step_size(&self) -> usize {
        self.pool.0.pow(self.conv_blocks as u32)
    }

    /// Frequency extent after all front-end pooling.
    pub fn frontend_freq_dim(&self) -> usize {
        (0..self.conv_blocks).fold(self.feature_dim, |f, _| f / self.pool.1)
    }

    /// Width of the flattened front-end output feeding the projection.
    pub fn frontend_flat_dim(&self) -> usize {
        self.conv_channels * self.frontend_freq_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Attention parameter sets actually stored.
    pub fn attention_sets(&self) -> usize {
        if self.share_attention {
            1
        } else {
            self.attn_blocks
        }
    }
}

/// Q/K/V projection: rank-r bottleneck pair or a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection<T> {
    LowRank { down: Tensor<T>, up: Tensor<T> },
    Dense { w: Tensor<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub q: Projection<T>,
    pub k: Projection<T>,
    pub v: Projection<T>,
    /// Output projection, always dense d×d.
    pub out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnParams<T> {
    /// Grouped pointwise (d→ffn) + causal depthwise (kernel 3) + grouped
    /// pointwise (ffn→d).
    GroupSeparable {
        pw1_w: Tensor<T>,
        pw1_b: Tensor<T>,
        dw_w: Tensor<T>,
        dw_b: Tensor<T>,
        pw2_w: Tensor<T>,
        pw2_b: Tensor<T>,
    },
    /// Two dense layers with ReLU between.
    Dense { w1: Tensor<T>, b1: Tensor<T>, w2: Tensor<T>, b2: Tensor<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln_pre: NormParams<T>,
    pub ln_attn: NormParams<T>,
    pub ln_ffn: NormParams<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// All learnable weights plus the config that shaped them.
///
/// With `share_attention` there is exactly one [`AttentionParams`] set;
/// every block reads it, so one update moves all blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub conv: Vec<ConvBlockParams<T>>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub attention: Vec<AttentionParams<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub decoder_w: Tensor<T>,
    pub decoder_b: Tensor<T>,
}

/// How a tensor is initialized at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in ±1/√fan_in.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Name, shape, and init rule of every tensor, in canonical order. This
/// single list drives initialization, optimizer layout, and the checkpoint
/// container.
fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.model_dim;
    let r = cfg.lrd_rank;
    let c = cfg.conv_channels;
    let (kt, kf) = cfg.conv_kernel;
    let mut specs = Vec::new();
    for i in 0..cfg.conv_blocks {
        let cin = if i == 0 { 1 } else { c };
        specs.push((
            format!("conv{i}.w"),
            vec![c, cin, kt, kf],
            Init::Uniform { fan_in: cin * kt * kf },
        ));
        specs.push((format!("conv{i}.b"), vec![c], Init::Zeros));
    }
    let flat = cfg.frontend_flat_dim();
    specs.push(("proj.w".into(), vec![flat, d], Init::Uniform { fan_in: flat }));
    specs.push(("proj.b".into(), vec![d], Init::Zeros));
    for s in 0..cfg.attention_sets() {
        if cfg.use_lrd {
            for name in ["q", "k", "v"] {
                specs.push((
                    format!("attn{s}.{name}_down"),
                    vec![d, r],
                    Init::Uniform { fan_in: d },
                ));
                specs.push((format!("attn{s}.{name}_up"), vec![r, d], Init::Uniform { fan_in: r }));
            }
        } else {
            for name in ["q", "k", "v"] {
                specs.push((format!("attn{s}.{name}"), vec![d, d], Init::Uniform { fan_in: d }));
            }
        }
        specs.push((format!("attn{s}.out"), vec![d, d], Init::Uniform { fan_in: d }));
    }
    for i in 0..cfg.attn_blocks {
        for ln in ["ln_pre", "ln_attn", "ln_ffn"] {
            specs.push((format!("block{i}.{ln}.gain"), vec![d], Init::Ones));
            specs.push((format!("block{i}.{ln}.bias"), vec![d], Init::Zeros));
        }
        if cfg.use_group_separable {
            let e = cfg.ffn_dim;
            let g = cfg.ffn_groups;
            specs.push((
                format!("block{i}.ffn.pw1.w"),
                vec![e, d / g, 1],
                Init::Uniform { fan_in: d / g },
            ));
            specs.push((format!("block{i}.ffn.pw1.b"), vec![e], Init::Zeros));
            specs.push((format!("block{i}.ffn.dw.w"), vec![e, 1, 3], Init::Uniform { fan_in: 3 }));
            specs.push((format!("block{i}.ffn.dw.b"), vec![e], Init::Zeros));
            specs.push((
                format!("block{i}.ffn.pw2.w"),
                vec![d, e / g, 1],
                Init::Uniform { fan_in: e / g },
            ));
            specs.push((format!("block{i}.ffn.pw2.b"), vec![d], Init::Zeros));
        } else {
            let e = cfg.ffn_dim;
            specs.push((format!("block{i}.ffn.w1"), vec![d, e], Init::Uniform { fan_in: d }));
            specs.push((format!("block{i}.ffn.b1"), vec![e], Init::Zeros));
            specs.push((format!("block{i}.ffn.w2"), vec![e, d], Init::Uniform { fan_in: e }));
            specs.push((format!("block{i}.ffn.b2"), vec![d], Init::Zeros));
        }
    }
    specs.push(("decoder.w".into(), vec![d, 1], Init::Uniform { fan_in: d }));
    specs.push(("decoder.b".into(), vec![1], Init::Zeros));
    specs
}

/// Names and shapes of every tensor a checkpoint must carry, in order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    tensor_specs(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

impl<T: Real> ModelParams<T> {
    /// Deterministic initialization: fan-in-scaled uniform weights, zero
    /// biases, unit norm gains; tensors drawn in canonical order.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<Tensor<T>> = tensor_specs(&config)
            .into_iter()
            .map(|(_, shape, init)| match init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
            })
            .collect();
        Self::assemble(config, tensors)
    }

    /// Assemble a parameter struct from tensors in canonical order.
    pub fn assemble(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let conv = (0..config.conv_blocks)
            .map(|_| ConvBlockParams { w: next(), b: next() })
            .collect();
        let proj_w = next();
        let proj_b = next();
        let attention = (0..config.attention_sets())
            .map(|_| {
                let mut proj = || {
                    if config.use_lrd {
                        Projection::LowRank { down: next(), up: next() }
                    } else {
                        Projection::Dense { w: next() }
                    }
                };
                let q = proj();
                let k = proj();
                let v = proj();
                AttentionParams { q, k, v, out: next() }
            })
            .collect();
        let blocks = (0..config.attn_blocks)
            .map(|_| {
                let ln_pre = NormParams { gain: next(), bias: next() };
                let ln_attn = NormParams { gain: next(), bias: next() };
                let ln_ffn = NormParams { gain: next(), bias: next() };
                let ffn = if config.use_group_separable {
                    FfnParams::GroupSeparable {
                        pw1_w: next(),
                        pw1_b: next(),
                        dw_w: next(),
                        dw_b: next(),
                        pw2_w: next(),
                        pw2_b: next(),
                    }
                } else {
                    FfnParams::Dense { w1: next(), b1: next(), w2: next(), b2: next() }
                };
                BlockParams { ln_pre, ln_attn, ln_ffn, ffn }
            })
            .collect();
        let decoder_w = next();
        let decoder_b = next();
        Ok(ModelParams { config, conv, proj_w, proj_b, attention, blocks, decoder_w, decoder_b })
    }

    /// Attention parameter set used by block `i` (the shared set, or its own).
    pub fn attention_for_block(&self, i: usize) -> &AttentionParams<T> {
        if self.config.share_attention {
            &self.attention[0]
        } else {
            &self.attention[i]
        }
    }

    /// Every tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = Vec::new();
        for cb in &self.conv {
            out.push(&cb.w);
            out.push(&cb.b);
        }
        out.push(&self.proj_w);
        out.push(&self.proj_b);
        for a in &self.attention {
            for p in [&a.q, &a.k, &a.v] {
                match p {
                    Projection::LowRank { down, up } => {
                        out.push(down);
                        out.push(up);
                    }
                    Projection::Dense { w } => out.push(w),
                }
            }
            out.push(&a.out);
        }
        for b in &self.blocks {
            for ln in [&b.ln_pre, &b.ln_attn, &b.ln_ffn] {
                out.push(&ln.gain);
                out.push(&ln.bias);
            }
            match &b.ffn {
                FfnParams::GroupSeparable { pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b } => {
                    out.extend([pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b]);
                }
                FfnParams::Dense { w1, b1, w2, b2 } => out.extend([w1, b1, w2, b2]),
            }
        }
        out.push(&self.decoder_w);
        out.push(&self.decoder_b);
        out
    }

    /// Mutable view of every tensor, same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for cb in &mut self.conv {
            out.push(&mut cb.w);
            out.push(&mut cb.b);
        }
        out.push(&mut self.proj_w);
        out.push(&mut self.proj_b);
        for a in &mut self.attention {
            for p in [&mut a.q, &mut a.k, &mut a.v] {
                match p {
                    Projection::LowRank { down, up } => {
                        out.push(down);
                        out.push(up);
                    }
                    Projection::Dense { w } => out.push(w),
                }
            }
            out.push(&mut a.out);
        }
        for b in &mut self.blocks {
            for ln in [&mut b.ln_pre, &mut b.ln_attn, &mut b.ln_ffn] {
                out.push(&mut ln.gain);
                out.push(&mut ln.bias);
            }
            match &mut b.ffn {
                FfnParams::GroupSeparable { pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b } => {
                    out.extend([pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b]);
                }
                FfnParams::Dense { w1, b1, w2, b2 } => out.extend([w1, b1, w2, b2]),
            }
        }
        out.push(&mut self.decoder_w);
        out.push(&mut self.decoder_b);
        out
    }

    /// Cast every tensor to another scalar type.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let tensors = self.tensors().iter().map(|t| t.cast()).collect();
        ModelParams::assemble(self.config.clone(), tensors).expect("same layout")
    }
}

/// Exact per-component parameter counts, derived from the config alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub conv_frontend: usize,
    pub input_proj: usize,
    /// Q/K/V/output projection weights across all stored sets (no biases exist).
    pub attention_projections: usize,
    pub norms: usize,
    pub ffn: usize,
    pub decoder: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.conv_frontend
            + self.input_proj
            + self.attention_projections
            + self.norms
            + self.ffn
            + self.decoder
    }

    pub fn components(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("conv-frontend", self.conv_frontend),
            ("input-proj", self.input_proj),
            ("attention", self.attention_projections),
            ("norms", self.norms),
            ("ffn", self.ffn),
            ("decoder", self.decoder),
        ]
    }
}

/// Parameter count is a pure function of the configuration.
pub fn count_parameters(cfg: &ModelConfig) -> ParamCounts {
    let d = cfg.model_dim;
    let c = cfg.conv_channels;
    let (kt, kf) = cfg.conv_kernel;
    let conv_frontend: usize = (0..cfg.conv_blocks)
        .map(|i| {
            let cin = if i == 0 { 1 } else { c };
            c * cin * kt * kf + c
        })
        .sum();
    let flat = cfg.frontend_flat_dim();
    let input_proj = flat * d + d;
    let per_set = if cfg.use_lrd { 3 * 2 * d * cfg.lrd_rank + d * d } else { 4 * d * d };
    let attention_projections = per_set * cfg.attention_sets();
    let norms = cfg.attn_blocks * 3 * 2 * d;
    let e = cfg.ffn_dim;
    let g = cfg.ffn_groups;
    let per_ffn = if cfg.use_group_separable {
        (e * (d / g) + e) + (e * 3 + e) + (d * (e / g) + d)
    } else {
        (d * e + e) + (e * d + d)
    };
    let ffn = per_ffn * cfg.attn_blocks;
    let decoder = d + 1;
    ParamCounts { conv_frontend, input_proj, attention_projections, norms, ffn, decoder }
}

/// Weight count (no biases) of a depthwise(k)+pointwise 1D stage on
/// `cin → cout` channels.
pub fn separable_conv1d_weights(cin: usize, cout: usize, k: usize) -> usize {
    cin * k + cin * cout
}

/// Weight count (no biases) of the dense 1D convolution it replaces.
pub fn dense_conv1d_weights(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k
}
