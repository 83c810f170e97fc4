//! Log-mel filterbank feature extraction.
//!
//! 40 log-mel energies per frame, 25 ms Hann window, 10 ms hop, 16 kHz in,
//! 100 frames/s out. Spectra are computed in double precision regardless of
//! the model's scalar type, so extraction is deterministic across builds.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const WINDOW: usize = 400; // 25 ms
pub const HOP: usize = 160; // 10 ms
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 40;
pub const FRAME_RATE: usize = SAMPLE_RATE as usize / HOP; // 100
pub const FMIN_HZ: f64 = 20.0;
pub const FMAX_HZ: f64 = 8_000.0;
/// Energies are floored here before the log, so silence maps to ln(1e-10).
pub const ENERGY_FLOOR: f64 = 1e-10;

/// Time-major matrix of log-mel frames: shape `[num_frames, N_MELS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    frames: Tensor<T>,
}

impl<T: Real> FeatureSequence<T> {
    pub fn new(frames: Tensor<T>) -> Result<Self> {
        let (t, _) = frames.dims2()?;
        if t == 0 {
            return Err(Error::InvalidArgument {
                op: "FeatureSequence::new",
                msg: "at least one frame required".into(),
            });
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("feature frames".into()));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[T] {
        let f = self.feature_dim();
        &self.frames.data()[t * f..(t + 1) * f]
    }

    /// First `n` frames as a new sequence.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let f = self.feature_dim();
        let data = self.frames.data()[..n * f].to_vec();
        FeatureSequence::new(Tensor::new(vec![n, f], data)?)
    }

    pub fn cast<U: Real>(&self) -> FeatureSequence<U> {
        FeatureSequence { frames: self.frames.cast() }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided spectrum: `[N_MELS][N_FFT/2+1]`.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let n_bins = N_FFT / 2 + 1;
    let mel_lo = hz_to_mel(FMIN_HZ);
    let mel_hi = hz_to_mel(FMAX_HZ);
    let points: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    (0..N_MELS)
        .map(|m| {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rise = (f - lo) / (center - lo);
                    let fall = (hi - f) / (hi - center);
                    rise.min(fall).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Frequency range `[lo, hi]` covered by one mel filter.
pub fn mel_filter_range(m: usize) -> (f64, f64) {
    let mel_lo = hz_to_mel(FMIN_HZ);
    let mel_hi = hz_to_mel(FMAX_HZ);
    let point = |i: usize| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64);
    (point(m), point(m + 2))
}

/// Reusable extractor (FFT plan and filterbank built once).
pub struct FeatureExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(N_FFT);
        // Hann window
        let window = (0..WINDOW)
            .map(|i| {
                0.5 * (1.0
                    - (2.0 * std::f64::consts::PI * i as f64 / (WINDOW - 1) as f64).cos())
            })
            .collect();
        FeatureExtractor { fft, window, filters: mel_filterbank() }
    }

    /// Number of frames a clip of `n` samples yields: `1 + ⌊(n − 400)/160⌋`.
    pub fn num_frames(n_samples: usize) -> Option<usize> {
        if n_samples < WINDOW {
            None
        } else {
            Some(1 + (n_samples - WINDOW) / HOP)
        }
    }

    /// Log-mel energies of one `WINDOW`-sample analysis frame.
    pub fn extract_frame<T: Real>(&self, samples: &[f64], out: &mut Vec<T>) {
        debug_assert_eq!(samples.len(), WINDOW);
        let n_bins = N_FFT / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        for i in 0..WINDOW {
            buf[i] = Complex::new(samples[i] * self.window[i], 0.0);
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = (0..n_bins).map(|k| buf[k].norm_sqr()).collect();
        for filter in &self.filters {
            let mut e = 0.0;
            for (w, p) in filter.iter().zip(&power) {
                e += w * p;
            }
            out.push(T::of(e.max(ENERGY_FLOOR).ln()));
        }
    }

    pub fn extract<T: Real>(&self, clip: &AudioClip) -> Result<FeatureSequence<T>> {
        let n = clip.samples.len();
        let Some(num_frames) = Self::num_frames(n) else {
            return Err(Error::Audio(format!(
                "clip of {n} samples is shorter than one {WINDOW}-sample analysis window"
            )));
        };
        let mut out = Vec::with_capacity(num_frames * N_MELS);
        for t in 0..num_frames {
            let start = t * HOP;
            self.extract_frame(&clip.samples[start..start + WINDOW], &mut out);
        }
        FeatureSequence::new(Tensor::new(vec![num_frames, N_MELS], out)?)
    }
}

/// Incremental extraction with bounded memory: push samples in any chunk
/// size, get completed frames back. Arithmetic matches [`FeatureExtractor::extract`]
/// because both paths call [`FeatureExtractor::extract_frame`].
pub struct StreamingFeatureExtractor {
    extractor: FeatureExtractor,
    buffer: Vec<f64>,
}

impl Default for StreamingFeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl StreamingFeatureExtractor {
    pub fn new() -> Self {
        StreamingFeatureExtractor { extractor: FeatureExtractor::new(), buffer: Vec::new() }
    }

    /// Append samples; returns flat `[n, N_MELS]` rows for every analysis
    /// window completed by this chunk.
    pub fn push_samples<T: Real>(&mut self, samples: &[f64]) -> Vec<T> {
        self.buffer.extend_from_slice(samples);
        let mut out = Vec::new();
        let mut consumed = 0;
        while self.buffer.len() - consumed >= WINDOW {
            self.extractor.extract_frame(&self.buffer[consumed..consumed + WINDOW], &mut out);
            consumed += HOP;
        }
        self.buffer.drain(..consumed);
        out
    }

    pub fn reset(&mut self) {
        self.buffer.clear();
    }
}

/// One-shot extraction; builds a throwaway [`FeatureExtractor`].
pub fn extract_features<T: Real>(clip: &AudioClip) -> Result<FeatureSequence<T>> {
    FeatureExtractor::new().extract(clip)
}
