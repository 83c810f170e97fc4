//! Parallel vs sequential throughput on the two data-parallel hot paths:
//! per-clip gradient computation (training) and per-clip scoring
//! (evaluation). `parallel` fans out over rayon; the `_seq` twins run the
//! identical closure on one thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kws_core::features::{extract_features, FeatureSequence, FRAME_RATE};
use kws_core::labels::expand_labels;
use kws_core::loss::{focal_loss, FocalLossConfig};
use kws_core::model::{forward_on_tape, BoundParams, ModelConfig, ModelParams};
use kws_core::parallel::{map_items, map_items_seq};
use kws_core::synth;
use kws_core::tape::Tape;

struct BenchClip {
    features: FeatureSequence<f32>,
    keyword_end_frame: Option<usize>,
}

fn bench_clips(n: usize) -> Vec<BenchClip> {
    let spec = synth::CorpusSpec {
        positives: n / 2,
        negatives: n - n / 2,
        clip_s: 1.0,
        snrs_db: vec![10.0],
        distractor_fraction: 0.5,
        seed: 31,
    };
    let (pos, neg) = synth::corpus(&spec).unwrap();
    pos.into_iter()
        .map(|c| BenchClip {
            features: extract_features(&c.clip).unwrap(),
            keyword_end_frame: Some((c.keyword_end_s.unwrap() * FRAME_RATE as f64) as usize),
        })
        .chain(neg.into_iter().map(|c| BenchClip {
            features: extract_features(&c.clip).unwrap(),
            keyword_end_frame: None,
        }))
        .collect()
}

fn media_model() -> ModelParams<f32> {
    ModelParams::build(ModelConfig::default(), 1).unwrap()
}

fn clip_gradient(params: &ModelParams<f32>, clip: &BenchClip) -> f64 {
    let cfg = &params.config;
    let labels = expand_labels(
        clip.keyword_end_frame,
        clip.features.num_frames(),
        cfg.step_size(),
        6,
        6,
    )
    .unwrap();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(params, &mut tape, true);
    let posteriors = forward_on_tape(&mut tape, cfg, &bound, &clip.features).unwrap();
    let loss = focal_loss(&mut tape, posteriors, &labels, &FocalLossConfig::default()).unwrap();
    tape.backward(loss).unwrap();
    tape.grad(bound.ids[0]).unwrap()[0] as f64
}

fn clip_score(params: &ModelParams<f32>, clip: &BenchClip) -> f64 {
    let out = params.forward(&clip.features).unwrap();
    out.iter().cloned().fold(0.0f32, f32::max) as f64
}

fn bench_batch_gradient(c: &mut Criterion) {
    let params = media_model();
    let clips = bench_clips(8);
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", clips.len()), |b| {
        b.iter(|| map_items(&clips, |clip| clip_gradient(&params, clip)))
    });
    group.bench_function(BenchmarkId::new("sequential", clips.len()), |b| {
        b.iter(|| map_items_seq(&clips, |clip| clip_gradient(&params, clip)))
    });
    group.finish();
}

fn bench_corpus_scoring(c: &mut Criterion) {
    let params = media_model();
    let clips = bench_clips(32);
    let mut group = c.benchmark_group("corpus_scoring");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", clips.len()), |b| {
        b.iter(|| map_items(&clips, |clip| clip_score(&params, clip)))
    });
    group.bench_function(BenchmarkId::new("sequential", clips.len()), |b| {
        b.iter(|| map_items_seq(&clips, |clip| clip_score(&params, clip)))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradient, bench_corpus_scoring);
criterion_main!(benches);
