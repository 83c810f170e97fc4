//! Dataset manifests and keyword-end annotation resolution.
//!
//! Manifest format: UTF-8 CSV with header-less rows
//! `path,label,keyword_end_s` where `label ∈ {pos,neg}` and the timestamp
//! column may be empty.

use std::path::{Path, PathBuf};

use crate::audio::{read_wav, AudioClip};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, FRAME_RATE};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub is_positive: bool,
    /// Annotated end of the keyword, seconds from clip start.
    pub keyword_end_s: Option<f64>,
}

/// Parse a manifest file. Row numbers in errors are 1-based.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Manifest {
        path: path.display().to_string(),
        row: 0,
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                row,
                msg: format!("expected 3 fields `path,label,keyword_end_s`, got {}", fields.len()),
            });
        }
        let is_positive = match fields[1].trim() {
            "pos" => true,
            "neg" => false,
            other => {
                return Err(Error::Manifest {
                    path: path.display().to_string(),
                    row,
                    msg: format!("label must be pos or neg, got `{other}`"),
                })
            }
        };
        let keyword_end_s = match fields[2].trim() {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| Error::Manifest {
                path: path.display().to_string(),
                row,
                msg: format!("bad keyword_end_s `{s}`: {e}"),
            })?),
        };
        if let Some(end) = keyword_end_s {
            if !is_positive {
                return Err(Error::Manifest {
                    path: path.display().to_string(),
                    row,
                    msg: "keyword_end_s given on a negative entry".into(),
                });
            }
            if end <= 0.0 {
                return Err(Error::Manifest {
                    path: path.display().to_string(),
                    row,
                    msg: format!("keyword_end_s must be positive, got {end}"),
                });
            }
        }
        let entry_path = base.join(fields[0].trim());
        entries.push(ManifestEntry { path: entry_path, is_positive, keyword_end_s });
    }
    Ok(entries)
}

/// Resolve the keyword-end frame for a manifest entry.
///
/// Annotated positives round the timestamp to the frame grid. Positives
/// without a timestamp fall back to energy endpointing: the last frame whose
/// energy is within 30 dB of the loudest frame (keyword-only clips end
/// roughly when the speech does). Negatives yield `None`.
pub fn resolve_keyword_end<T: Real>(
    entry: &ManifestEntry,
    features: &FeatureSequence<T>,
) -> Result<Option<usize>> {
    if !entry.is_positive {
        return Ok(None);
    }
    let t = features.num_frames();
    if let Some(end_s) = entry.keyword_end_s {
        let frame = (end_s * FRAME_RATE as f64).round() as usize;
        if frame >= t {
            return Err(Error::Manifest {
                path: entry.path.display().to_string(),
                row: 0,
                msg: format!("keyword_end_s {end_s} is frame {frame}, past the {t} frames"),
            });
        }
        return Ok(Some(frame));
    }
    Ok(Some(energy_endpoint(features)))
}

/// Last frame whose total mel energy exceeds (max − 30 dB).
pub fn energy_endpoint<T: Real>(features: &FeatureSequence<T>) -> usize {
    let t = features.num_frames();
    let db: Vec<f64> = (0..t)
        .map(|i| {
            let lin: f64 = features.frame(i).iter().map(|v| v.as_f64().exp()).sum();
            10.0 * lin.log10()
        })
        .collect();
    let max = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    db.iter().rposition(|&v| v > max - 30.0).unwrap_or(t - 1)
}

/// A manifest entry with its audio loaded and keyword end resolved.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub clip: AudioClip,
    pub is_positive: bool,
    /// Keyword end: (frame index, seconds). Absent for negatives.
    pub keyword_end: Option<(usize, f64)>,
}

/// Load every manifest entry's audio into memory, resolving annotations.
pub fn load_clips(entries: &[ManifestEntry]) -> Result<Vec<LoadedClip>> {
    entries
        .iter()
        .map(|entry| {
            let clip = read_wav(&entry.path)?;
            let features: FeatureSequence<f64> = crate::features::extract_features(&clip)?;
            let keyword_end = resolve_keyword_end(entry, &features)?
                .map(|f| (f, f as f64 / FRAME_RATE as f64));
            Ok(LoadedClip { clip, is_positive: entry.is_positive, keyword_end })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_features;
    use crate::synth;
    use std::io::Write;

    #[test]
    fn timestamp_rounds_to_the_frame_grid() {
        let entry = ManifestEntry {
            path: PathBuf::from("x.wav"),
            is_positive: true,
            keyword_end_s: Some(1.20),
        };
        let clip = synth::white_noise(1.5, 0.3, 1);
        let feats: FeatureSequence<f64> = extract_features(&clip).unwrap();
        assert_eq!(resolve_keyword_end(&entry, &feats).unwrap(), Some(120));
    }

    #[test]
    fn negatives_have_no_positive_frame() {
        let entry =
            ManifestEntry { path: PathBuf::from("x.wav"), is_positive: false, keyword_end_s: None };
        let clip = synth::white_noise(0.5, 0.3, 2);
        let feats: FeatureSequence<f64> = extract_features(&clip).unwrap();
        assert_eq!(resolve_keyword_end(&entry, &feats).unwrap(), None);
    }

    #[test]
    fn energy_fallback_finds_the_end_of_a_tone() {
        // 0.5 s tone then 0.5 s silence: endpoint should sit near frame 50
        let clip = synth::concat(&[&synth::tone(600.0, 0.5, 0.5), &synth::silence(0.5)]);
        let entry =
            ManifestEntry { path: PathBuf::from("x.wav"), is_positive: true, keyword_end_s: None };
        let feats: FeatureSequence<f64> = extract_features(&clip).unwrap();
        let end = resolve_keyword_end(&entry, &feats).unwrap().unwrap();
        assert!(
            (end as i64 - 50).unsigned_abs() <= 3,
            "fallback endpoint {end} not within ±3 frames of 50"
        );
    }

    #[test]
    fn timestamp_past_clip_end_is_an_annotation_error() {
        let entry = ManifestEntry {
            path: PathBuf::from("x.wav"),
            is_positive: true,
            keyword_end_s: Some(9.0),
        };
        let clip = synth::white_noise(0.5, 0.3, 3);
        let feats: FeatureSequence<f64> = extract_features(&clip).unwrap();
        assert!(resolve_keyword_end(&entry, &feats).is_err());
    }

    #[test]
    fn manifest_parses_and_reports_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("list.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a.wav,pos,1.25").unwrap();
        writeln!(f, "b.wav,neg,").unwrap();
        writeln!(f, "# comment").unwrap();
        drop(f);
        let entries = load_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert!(entries[0].is_positive);
        assert_eq!(entries[0].keyword_end_s, Some(1.25));
        assert_eq!(entries[0].path, dir.path().join("a.wav"));
        assert!(!entries[1].is_positive);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a.wav,maybe,\n").unwrap();
        let err = load_manifest(&bad).unwrap_err().to_string();
        assert!(err.contains(":1:"), "row number missing from: {err}");
    }
}
