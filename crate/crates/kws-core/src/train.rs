//! Minibatch training: Adam, warmup-hold-exponential-decay learning rate,
//! SNR augmentation, metric logging, periodic checkpoints.
//!
//! Each batch item builds its own tape (clips stay ragged, no padding);
//! per-clip gradients are computed in parallel and averaged in input order,
//! so runs are bit-reproducible for a fixed seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mix_at_snr, AudioClip};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::labels::expand_labels;
use crate::loss::{focal_loss, FocalLossConfig};
use crate::model::{forward_on_tape, BoundParams, ModelParams};
use crate::parallel::map_items;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Label expansion around the annotated keyword end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Steps replicated before the original positive (L).
    pub expand_before: usize,
    /// Steps replicated after it (R).
    pub expand_after: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig { expand_before: 6, expand_after: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_hold: f64,
    pub lr_final: f64,
    /// Warmup length; defaults to 10% of `steps`.
    pub warmup_steps: Option<usize>,
    /// Hold length; defaults to 40% of `steps`.
    pub hold_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// SNRs (dB) drawn uniformly when a clip is mixed with noise.
    pub snr_choices_db: Vec<f64>,
    /// Probability a training clip gets noise mixed in (needs a noise pool).
    pub mix_probability: f64,
    /// Batch composition: this many negatives per positive.
    pub negatives_per_positive: usize,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 500,
            lr_start: 1e-6,
            lr_hold: 5e-5,
            lr_final: 1e-6,
            warmup_steps: None,
            hold_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            snr_choices_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            mix_probability: 0.5,
            negatives_per_positive: 4,
            checkpoint_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 10)
    }

    pub fn hold(&self) -> usize {
        self.hold_steps.unwrap_or(self.steps * 4 / 10)
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        c(self.batch_size >= 1, "batch_size must be ≥ 1".into())?;
        c(self.steps >= 1, "steps must be ≥ 1".into())?;
        c(
            self.lr_start <= self.lr_hold && self.lr_final <= self.lr_hold,
            format!(
                "start/final rates must not exceed the hold rate ({} / {} vs {})",
                self.lr_start, self.lr_final, self.lr_hold
            ),
        )?;
        c(self.lr_start > 0.0 && self.lr_final > 0.0, "learning rates must be positive".into())?;
        c(
            self.warmup() + self.hold() < self.steps,
            format!(
                "warmup {} + hold {} must leave room for decay in {} steps",
                self.warmup(),
                self.hold(),
                self.steps
            ),
        )?;
        c(
            (0.0..=1.0).contains(&self.mix_probability),
            "mix_probability must be in [0,1]".into(),
        )?;
        c(!self.snr_choices_db.is_empty(), "snr_choices_db must not be empty".into())?;
        Ok(())
    }
}

/// Piecewise learning rate: linear ramp `lr_start → lr_hold` over the warmup,
/// flat hold, then exponential decay hitting `lr_final` exactly at
/// `total_steps − 1`.
pub fn lr_at(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    let w = cfg.warmup();
    let h = cfg.hold();
    if step < w {
        return cfg.lr_start + (cfg.lr_hold - cfg.lr_start) * step as f64 / w as f64;
    }
    if step < w + h {
        return cfg.lr_hold;
    }
    let decay_len = total_steps.saturating_sub(1).saturating_sub(w + h);
    if decay_len == 0 {
        return cfg.lr_final;
    }
    // solve lr_hold·exp(−λ·decay_len) = lr_final for λ
    let lambda = (cfg.lr_hold / cfg.lr_final).ln() / decay_len as f64;
    cfg.lr_hold * (-lambda * (step - w - h) as f64).exp()
}

/// Adam with bias correction; the only place parameters are mutated.
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
    beta1: T,
    beta2: T,
    epsilon: T,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig, tensor_sizes: &[usize]) -> Self {
        Adam {
            m: tensor_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: tensor_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
            beta1: T::of(cfg.beta1),
            beta2: T::of(cfg.beta2),
            epsilon: T::of(cfg.epsilon),
        }
    }

    /// One update over tensors aligned with the moment buffers.
    pub fn step(&mut self, tensors: Vec<&mut Tensor<T>>, grads: &[Vec<T>], lr: T) -> Result<()> {
        if tensors.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "adam step over {} tensors / {} grads, expected {}",
                tensors.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for ((tensor, grad), (m, v)) in
            tensors.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((p, &g), (m, v)) in
                tensor.data_mut().iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One training example: audio plus its resolved keyword-end frame.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub clip: AudioClip,
    pub keyword_end_frame: Option<usize>,
}

/// In-memory training pool.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub positives: Vec<TrainItem>,
    pub negatives: Vec<TrainItem>,
    /// Clips mixed into training audio for augmentation; empty disables mixing.
    pub noise: Vec<AudioClip>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Deterministic epoch shuffler: hands out indices, reshuffling per pass.
struct IndexQueue {
    order: Vec<usize>,
    pos: usize,
}

impl IndexQueue {
    fn new(n: usize) -> Self {
        IndexQueue { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }
}

/// Augmentation decision for one batch slot, drawn up front on the main
/// thread so worker order cannot affect the RNG stream.
struct BatchDraw {
    positive: bool,
    item: usize,
    mix: Option<(usize, usize, f64)>, // noise index, offset, snr
}

/// Run the training loop. `on_checkpoint` fires every
/// `checkpoint_interval` steps and once at the end.
pub fn train<T: Real>(
    params: &mut ModelParams<T>,
    data: &TrainSet,
    cfg: &TrainConfig,
    loss_cfg: &FocalLossConfig,
    label_cfg: &LabelConfig,
    mut on_checkpoint: impl FnMut(usize, &ModelParams<T>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.positives.is_empty() || data.negatives.is_empty() {
        return Err(Error::Train(format!(
            "need at least one positive and one negative clip, got {} / {}",
            data.positives.len(),
            data.negatives.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pos_queue = IndexQueue::new(data.positives.len());
    let mut neg_queue = IndexQueue::new(data.negatives.len());
    let extractor = FeatureExtractor::new();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(cfg, &sizes);
    let step_size = params.config.step_size();
    let mut log = Vec::with_capacity(cfg.steps);

    let n_pos = (cfg.batch_size / (1 + cfg.negatives_per_positive)).max(1);
    for step in 0..cfg.steps {
        let draws: Vec<BatchDraw> = (0..cfg.batch_size)
            .map(|slot| {
                let positive = slot < n_pos;
                let item = if positive {
                    pos_queue.next(&mut rng)
                } else {
                    neg_queue.next(&mut rng)
                };
                let mix = if !data.noise.is_empty() && rng.gen_bool(cfg.mix_probability) {
                    let noise = rng.gen_range(0..data.noise.len());
                    let offset = rng.gen_range(0..data.noise[noise].samples.len());
                    let snr = cfg.snr_choices_db[rng.gen_range(0..cfg.snr_choices_db.len())];
                    Some((noise, offset, snr))
                } else {
                    None
                };
                BatchDraw { positive, item, mix }
            })
            .collect();

        let results: Vec<Result<(f64, Vec<Vec<T>>)>> = map_items(&draws, |draw| {
            let item = if draw.positive {
                &data.positives[draw.item]
            } else {
                &data.negatives[draw.item]
            };
            let clip = match draw.mix {
                Some((noise, offset, snr)) => {
                    mix_at_snr(&item.clip, &data.noise[noise], snr, offset)?.clip
                }
                None => item.clip.clone(),
            };
            let features = extractor.extract::<T>(&clip)?;
            let labels = expand_labels(
                item.keyword_end_frame,
                features.num_frames(),
                step_size,
                label_cfg.expand_before,
                label_cfg.expand_after,
            )?;
            let mut tape = Tape::new();
            let bound = BoundParams::bind(params, &mut tape, true);
            let posteriors = forward_on_tape(&mut tape, &params.config, &bound, &features)?;
            let loss = focal_loss(&mut tape, posteriors, &labels, loss_cfg)?;
            let loss_value = tape.value(loss).data()[0].as_f64();
            tape.backward(loss)?;
            let grads: Vec<Vec<T>> = bound
                .ids
                .iter()
                .map(|&id| tape.grad(id).expect("trainable leaf").to_vec())
                .collect();
            Ok((loss_value, grads))
        });

        // deterministic reduction in batch order
        let scale = T::of(1.0 / cfg.batch_size as f64);
        let mut mean_loss = 0.0;
        let mut mean_grads: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        for res in results {
            let (loss_value, grads) = res?;
            mean_loss += loss_value / cfg.batch_size as f64;
            for (acc, g) in mean_grads.iter_mut().zip(&grads) {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v * scale;
                }
            }
        }
        if !mean_loss.is_finite() {
            return Err(Error::Train(format!("non-finite loss {mean_loss} at step {step}")));
        }
        let grad_norm = mean_grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let lr = lr_at(step, cfg, cfg.steps);
        adam.step(params.tensors_mut(), &mean_grads, T::of(lr))?;
        log.push(StepRecord { step, lr, loss: mean_loss, grad_norm });

        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            on_checkpoint(step, params)?;
        }
    }
    on_checkpoint(cfg.steps.saturating_sub(1), params)?;
    Ok(log)
}

/// Write step records as the append-only metrics CSV `step,lr,loss,grad_norm`.
pub fn write_metrics_csv(path: &std::path::Path, log: &[StepRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,lr,loss,grad_norm")?;
    for r in log {
        writeln!(f, "{},{:.9e},{:.9e},{:.9e}", r.step, r.lr, r.loss, r.grad_norm)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth;

    #[test]
    fn schedule_hits_the_three_pinned_rates() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup_steps: Some(100),
            hold_steps: Some(400),
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg, 1000), 1e-6);
        assert_eq!(lr_at(100, &cfg, 1000), 5e-5);
        assert!((lr_at(999, &cfg, 1000) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_at_segment_boundaries() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup_steps: Some(100),
            hold_steps: Some(400),
            ..Default::default()
        };
        // end of warmup vs first hold step
        let before = lr_at(99, &cfg, 1000);
        let at = lr_at(100, &cfg, 1000);
        assert!((at - before).abs() < (5e-5 - 1e-6) / 100.0 + 1e-12);
        // last hold step vs first decay step
        let hold_end = lr_at(499, &cfg, 1000);
        let decay_start = lr_at(500, &cfg, 1000);
        assert!((hold_end - decay_start).abs() < 1e-12);
        // decay is monotone down to the final rate
        let mut prev = decay_start;
        for step in 501..1000 {
            let lr = lr_at(step, &cfg, 1000);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn adam_leaves_parameters_alone_on_zero_gradient() {
        let cfg = TrainConfig::default();
        let mut t = Tensor::<f64>::full(vec![3], 0.7);
        let mut adam = Adam::new(&cfg, &[3]);
        adam.step(vec![&mut t], &[vec![0.0; 3]], 0.1).unwrap();
        assert_eq!(t.data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn adam_first_step_is_a_bias_corrected_unit_step() {
        let cfg = TrainConfig::default();
        let mut t = Tensor::<f64>::full(vec![1], 1.0);
        let mut adam = Adam::new(&cfg, &[1]);
        adam.step(vec![&mut t], &[vec![1.0]], 0.1).unwrap();
        // m̂ = 1, v̂ = 1 → update = −lr/(1+ε)
        assert!((t.data()[0] - 0.9).abs() < 1e-8, "got {}", t.data()[0]);
    }

    #[test]
    fn adam_runs_are_bit_identical() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut t = Tensor::<f64>::full(vec![4], 0.3);
            let mut adam = Adam::new(&cfg, &[4]);
            for i in 0..25 {
                let g = vec![(i as f64 * 0.37).sin(); 4];
                adam.step(vec![&mut t], &[g], 0.01).unwrap();
            }
            t
        };
        assert_eq!(run(), run());
    }

    /// Tiny model sized for real 40-dim audio features.
    fn small_audio_model() -> ModelConfig {
        ModelConfig { feature_dim: 40, ..ModelConfig::tiny() }
    }

    fn tiny_train_set() -> TrainSet {
        let kw = synth::keyword(0.5);
        let pos = synth::embed_in_noise(&kw, 1.0, 0.2, 15.0, 7).unwrap();
        let neg = synth::white_noise(1.0, 0.3, 8);
        TrainSet {
            positives: vec![TrainItem { clip: pos, keyword_end_frame: Some(80) }],
            negatives: vec![TrainItem { clip: neg, keyword_end_frame: None }],
            noise: Vec::new(),
        }
    }

    fn overfit_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps,
            lr_hold: 5e-3,
            lr_start: 1e-5,
            lr_final: 1e-4,
            warmup_steps: Some(steps / 10),
            hold_steps: Some(steps / 2),
            negatives_per_positive: 1,
            checkpoint_interval: 0,
            ..Default::default()
        }
    }

    #[test]
    fn overfits_a_single_pair_of_clips() {
        let cfg_model = small_audio_model();
        let mut params: ModelParams<f32> = ModelParams::build(cfg_model, 3).unwrap();
        let data = tiny_train_set();
        let log = train(
            &mut params,
            &data,
            &overfit_cfg(300),
            &FocalLossConfig::default(),
            &LabelConfig::default(),
            |_, _| Ok(()),
        )
        .unwrap();
        let initial = log.first().unwrap().loss;
        let final_ = log.last().unwrap().loss;
        assert!(
            final_ < 0.05 * initial,
            "loss {final_} did not fall below 5% of initial {initial}"
        );
        assert!(log.iter().all(|r| r.grad_norm.is_finite()));
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let cfg_model = small_audio_model();
        let data = tiny_train_set();
        let run = || {
            let mut params: ModelParams<f32> =
                ModelParams::build(cfg_model.clone(), 3).unwrap();
            let log = train(
                &mut params,
                &data,
                &overfit_cfg(40),
                &FocalLossConfig::default(),
                &LabelConfig::default(),
                |_, _| Ok(()),
            )
            .unwrap();
            (params, log.iter().map(|r| r.loss).collect::<Vec<_>>())
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(l1, l2, "loss curves diverged");
        assert_eq!(p1, p2, "final parameters diverged");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut params: ModelParams<f32> = ModelParams::build(ModelConfig::tiny(), 3).unwrap();
        let data = TrainSet::default();
        assert!(matches!(
            train(
                &mut params,
                &data,
                &overfit_cfg(10),
                &FocalLossConfig::default(),
                &LabelConfig::default(),
                |_, _| Ok(())
            ),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn shared_attention_stays_a_single_set_through_updates() {
        let cfg_model = ModelConfig { attn_blocks: 3, ..small_audio_model() };
        let mut params: ModelParams<f32> = ModelParams::build(cfg_model, 3).unwrap();
        let data = tiny_train_set();
        train(
            &mut params,
            &data,
            &overfit_cfg(10),
            &FocalLossConfig::default(),
            &LabelConfig::default(),
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(params.attention.len(), 1);
    }
}
