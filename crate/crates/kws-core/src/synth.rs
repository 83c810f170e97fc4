//! Synthetic audio: tones, noise, and a generated keyword-detection corpus.
//!
//! Used by the test suites and benchmarks to exercise the whole pipeline
//! without shipping recordings. The "keyword" is a fixed three-tone
//! sequence; distractors are tone sequences with other frequencies.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::audio::{mix_at_snr, AudioClip, SAMPLE_RATE};
use crate::error::Result;

/// Pure sine tone with a short cosine fade at both ends to avoid clicks.
pub fn tone(freq_hz: f64, duration_s: f64, amplitude: f64) -> AudioClip {
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let fade = (n / 50).max(1);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let mut v = amplitude * (2.0 * std::f64::consts::PI * freq_hz * t).sin();
            if i < fade {
                v *= 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / fade as f64).cos());
            }
            if n - i <= fade {
                let j = n - i;
                v *= 0.5 * (1.0 - (std::f64::consts::PI * j as f64 / fade as f64).cos());
            }
            v
        })
        .collect();
    AudioClip::from_samples(samples)
}

/// Uniform white noise in `[-amplitude, amplitude]`.
pub fn white_noise(duration_s: f64, amplitude: f64, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    AudioClip::from_samples((0..n).map(|_| rng.gen_range(-amplitude..amplitude)).collect())
}

/// Silence of the given duration.
pub fn silence(duration_s: f64) -> AudioClip {
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    AudioClip::from_samples(vec![0.0; n])
}

/// Concatenate clips back to back.
pub fn concat(clips: &[&AudioClip]) -> AudioClip {
    let mut samples = Vec::new();
    for c in clips {
        samples.extend_from_slice(&c.samples);
    }
    AudioClip::from_samples(samples)
}

/// The fixed keyword: three 0.2 s tones (total 0.6 s).
pub const KEYWORD_FREQS: [f64; 3] = [700.0, 1400.0, 1000.0];

/// Duration of the synthetic keyword in seconds.
pub const KEYWORD_DURATION_S: f64 = 0.6;

/// Render the keyword tone sequence.
pub fn keyword(amplitude: f64) -> AudioClip {
    let parts: Vec<AudioClip> =
        KEYWORD_FREQS.iter().map(|&f| tone(f, KEYWORD_DURATION_S / 3.0, amplitude)).collect();
    concat(&parts.iter().collect::<Vec<_>>())
}

/// A three-tone sequence that is NOT the keyword (frequencies drawn away
/// from the keyword set, or keyword frequencies in a different order).
pub fn distractor(rng: &mut ChaCha8Rng, amplitude: f64) -> AudioClip {
    let freqs: [f64; 3] = if rng.gen_bool(0.5) {
        // shuffled keyword frequencies (never the true order)
        let mut f = KEYWORD_FREQS;
        loop {
            f.shuffle(rng);
            if f != KEYWORD_FREQS {
                break;
            }
        }
        f
    } else {
        [
            rng.gen_range(300.0..650.0),
            rng.gen_range(1600.0..2400.0),
            rng.gen_range(300.0..650.0),
        ]
    };
    let parts: Vec<AudioClip> =
        freqs.iter().map(|&f| tone(f, KEYWORD_DURATION_S / 3.0, amplitude)).collect();
    concat(&parts.iter().collect::<Vec<_>>())
}

/// One generated clip plus its keyword-end annotation (seconds), when positive.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip: AudioClip,
    pub keyword_end_s: Option<f64>,
}

/// Generation knobs for [`corpus`].
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub positives: usize,
    pub negatives: usize,
    /// Total clip duration in seconds.
    pub clip_s: f64,
    /// SNRs (dB) the keyword/distractor is embedded at, drawn uniformly.
    pub snrs_db: Vec<f64>,
    /// Fraction of negatives that carry a distractor tone sequence.
    pub distractor_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            positives: 200,
            negatives: 200,
            clip_s: 1.2,
            snrs_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            distractor_fraction: 0.5,
            seed: 17,
        }
    }
}

/// Embed `signal` into a noise bed of `clip_s` seconds at `snr_db`,
/// starting at `onset_s`. Returns the mixed clip.
pub fn embed_in_noise(
    signal: &AudioClip,
    clip_s: f64,
    onset_s: f64,
    snr_db: f64,
    noise_seed: u64,
) -> Result<AudioClip> {
    let total = (clip_s * SAMPLE_RATE as f64).round() as usize;
    let onset = (onset_s * SAMPLE_RATE as f64).round() as usize;
    let mut padded = vec![0.0; total];
    for (i, &s) in signal.samples.iter().enumerate() {
        if onset + i < total {
            padded[onset + i] = s;
        }
    }
    let padded = AudioClip::from_samples(padded);
    let noise = white_noise(clip_s, 0.3, noise_seed);
    Ok(mix_at_snr(&padded, &noise, snr_db, 0)?.clip)
}

/// Generate a keyword corpus: positives embed the keyword at a random onset;
/// negatives are noise, a fraction of them with a distractor sequence.
pub fn corpus(spec: &CorpusSpec) -> Result<(Vec<SynthClip>, Vec<SynthClip>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positives = Vec::with_capacity(spec.positives);
    for i in 0..spec.positives {
        let kw = keyword(0.5);
        let max_onset = spec.clip_s - KEYWORD_DURATION_S - 0.05;
        let onset = rng.gen_range(0.05..max_onset.max(0.06));
        let snr = *spec.snrs_db.choose(&mut rng).expect("snr set non-empty");
        let clip = embed_in_noise(&kw, spec.clip_s, onset, snr, spec.seed ^ (i as u64 + 1))?;
        positives.push(SynthClip { clip, keyword_end_s: Some(onset + KEYWORD_DURATION_S) });
    }
    let mut negatives = Vec::with_capacity(spec.negatives);
    for i in 0..spec.negatives {
        let with_distractor = rng.gen_bool(spec.distractor_fraction);
        let clip = if with_distractor {
            let d = distractor(&mut rng, 0.5);
            let max_onset = spec.clip_s - KEYWORD_DURATION_S - 0.05;
            let onset = rng.gen_range(0.05..max_onset.max(0.06));
            let snr = *spec.snrs_db.choose(&mut rng).expect("snr set non-empty");
            embed_in_noise(&d, spec.clip_s, onset, snr, spec.seed ^ (0x8000 + i as u64))?
        } else {
            white_noise(spec.clip_s, 0.3, spec.seed ^ (0x10000 + i as u64))
        };
        negatives.push(SynthClip { clip, keyword_end_s: None });
    }
    Ok((positives, negatives))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_has_expected_duration() {
        let kw = keyword(0.5);
        assert_eq!(kw.samples.len(), (KEYWORD_DURATION_S * SAMPLE_RATE as f64) as usize);
    }

    #[test]
    fn corpus_is_deterministic_for_a_seed() {
        let spec = CorpusSpec { positives: 3, negatives: 3, ..Default::default() };
        let (p1, n1) = corpus(&spec).unwrap();
        let (p2, n2) = corpus(&spec).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.clip.samples, b.clip.samples);
            assert_eq!(a.keyword_end_s, b.keyword_end_s);
        }
        for (a, b) in n1.iter().zip(&n2) {
            assert_eq!(a.clip.samples, b.clip.samples);
        }
    }

    #[test]
    fn distractor_never_reproduces_the_keyword_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let d = distractor(&mut rng, 0.5);
            assert_eq!(d.samples.len(), keyword(0.5).samples.len());
        }
    }
}
