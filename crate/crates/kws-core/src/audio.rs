//! Audio clips: WAV ingestion, normalization, and SNR-controlled mixing.
//!
//! The engine consumes 16 kHz mono 16-bit PCM only; anything else is
//! rejected at load time (no resampling).

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every clip must arrive at.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
}

impl AudioClip {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        AudioClip { samples }
    }

    /// Normalize 16-bit integer PCM into `[-1, 1]`.
    pub fn from_i16(samples: &[i16]) -> Self {
        AudioClip { samples: samples.iter().map(|&s| s as f64 / 32768.0).collect() }
    }

    pub fn to_i16(&self) -> Vec<i16> {
        self.samples
            .iter()
            .map(|&s| (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)
            .collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sq: f64 = self.samples.iter().map(|s| s * s).sum();
        (sq / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()))
    }
}

/// Read a RIFF PCM WAV file; rejects anything but 16-bit mono 16 kHz.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Audio(format!(
            "{}: expected 16-bit mono {} Hz PCM, got {} ch / {} Hz / {}-bit",
            path.display(),
            SAMPLE_RATE,
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok(AudioClip::from_i16(&samples))
}

/// Write a clip as 16-bit mono 16 kHz PCM WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    for s in clip.to_i16() {
        writer.write_sample(s).map_err(|e| Error::Audio(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Audio(e.to_string()))?;
    Ok(())
}

/// Read raw 16-bit little-endian mono PCM from a byte stream until EOF.
pub fn read_raw_pcm(reader: &mut impl Read) -> Result<AudioClip> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Audio("raw PCM stream has odd byte length".into()));
    }
    let samples: Vec<i16> =
        bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    Ok(AudioClip::from_i16(&samples))
}

/// Outcome of [`mix_at_snr`], including the gains the oracle needs to
/// re-measure the achieved signal-to-noise ratio.
#[derive(Debug, Clone)]
pub struct Mixed {
    pub clip: AudioClip,
    /// Gain applied to the noise segment before adding.
    pub noise_gain: f64,
    /// Gain applied to the whole mix to keep the peak ≤ 1.
    pub renorm: f64,
    /// Offset into the noise clip the segment was taken from.
    pub noise_offset: usize,
}

/// Mix `noise` into `speech` so that `20·log10(rms(speech)/rms(k·noise))`
/// equals `snr_db`. Noise shorter than the speech is looped; `noise_offset`
/// selects where the segment starts. The mix is renormalized to peak ≤ 1.
pub fn mix_at_snr(
    speech: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    noise_offset: usize,
) -> Result<Mixed> {
    let speech_rms = speech.rms();
    if speech_rms == 0.0 {
        return Err(Error::Audio("cannot set an SNR against silent speech (RMS 0)".into()));
    }
    if noise.samples.is_empty() {
        return Err(Error::Audio("empty noise clip".into()));
    }
    let n = speech.samples.len();
    let segment: Vec<f64> =
        (0..n).map(|i| noise.samples[(noise_offset + i) % noise.samples.len()]).collect();
    let seg_rms = {
        let sq: f64 = segment.iter().map(|s| s * s).sum();
        (sq / n as f64).sqrt()
    };
    if seg_rms == 0.0 {
        return Err(Error::Audio("noise segment is silent (RMS 0)".into()));
    }
    // rms(speech) / rms(k·noise) = 10^(snr/20)  ⇒  k = rms(speech)/(rms(noise)·10^(snr/20))
    let noise_gain = speech_rms / (seg_rms * 10f64.powf(snr_db / 20.0));
    let mut mixed: Vec<f64> =
        speech.samples.iter().zip(&segment).map(|(&s, &nz)| s + noise_gain * nz).collect();
    let peak = mixed.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let renorm = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if renorm != 1.0 {
        for s in &mut mixed {
            *s *= renorm;
        }
    }
    Ok(Mixed { clip: AudioClip::from_samples(mixed), noise_gain, renorm, noise_offset })
}
