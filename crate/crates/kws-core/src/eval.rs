//! FRR / false-alarms-per-hour evaluation and DET curves.
//!
//! One inference pass caches each clip's smoothed score stream; threshold
//! sweeps then replay the cached streams, so a full DET curve costs one
//! pass over the audio plus O(grid × steps) arithmetic.

use std::io::Write;
use std::path::Path;

use crate::audio::AudioClip;
use crate::detector::{detect, smooth, SmootherConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FRAME_RATE};
use crate::model::ModelParams;
use crate::parallel::map_items;
use crate::tensor::Real;

/// A trigger on a positive clip counts when it lands in
/// `[end − 0.5 s, end + 1.0 s]` around the annotated keyword end.
pub const HIT_WINDOW_BEFORE_S: f64 = 0.5;
pub const HIT_WINDOW_AFTER_S: f64 = 1.0;

/// Evaluation inputs: positive clips with their keyword-end timestamps, and
/// keyword-free audio.
pub struct EvalCorpus {
    pub positives: Vec<(AudioClip, f64)>,
    pub negatives: Vec<AudioClip>,
}

impl EvalCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::Eval("no positive clips".into()));
        }
        let negative_s: f64 = self.negatives.iter().map(|c| c.duration_s()).sum();
        if negative_s <= 0.0 {
            return Err(Error::Eval("no negative audio".into()));
        }
        Ok(())
    }
}

/// Cached smoothed score streams; threshold sweeps run against this.
pub struct ScoredCorpus {
    /// Smoothed scores plus the hit window (seconds) per positive clip.
    positives: Vec<(Vec<f64>, f64, f64)>,
    negatives: Vec<Vec<f64>>,
    negative_hours: f64,
    seconds_per_step: f64,
    refractory_steps: usize,
}

impl ScoredCorpus {
    /// One inference pass over the corpus (parallel across clips).
    pub fn score<T: Real>(
        params: &ModelParams<T>,
        corpus: &EvalCorpus,
        detector_cfg: &SmootherConfig,
    ) -> Result<Self> {
        corpus.validate()?;
        detector_cfg.validate()?;
        let extractor = FeatureExtractor::new();
        let seconds_per_step = params.config.step_size() as f64 / FRAME_RATE as f64;
        let window = detector_cfg.window_len;

        let run = |clip: &AudioClip| -> Result<Vec<f64>> {
            let features = extractor.extract::<T>(clip)?;
            let posteriors: Vec<f64> =
                params.forward(&features)?.iter().map(|p| p.as_f64()).collect();
            Ok(smooth(&posteriors, window))
        };
        let pos: Vec<Result<Vec<f64>>> =
            map_items(&corpus.positives, |(clip, _)| run(clip));
        let mut positives = Vec::with_capacity(pos.len());
        for (scores, (_, end_s)) in pos.into_iter().zip(&corpus.positives) {
            positives.push((
                scores?,
                end_s - HIT_WINDOW_BEFORE_S,
                end_s + HIT_WINDOW_AFTER_S,
            ));
        }
        let neg: Vec<Result<Vec<f64>>> = map_items(&corpus.negatives, run);
        let negatives = neg.into_iter().collect::<Result<Vec<_>>>()?;
        let negative_hours =
            corpus.negatives.iter().map(|c| c.duration_s()).sum::<f64>() / 3600.0;
        Ok(ScoredCorpus {
            positives,
            negatives,
            negative_hours,
            seconds_per_step,
            refractory_steps: detector_cfg.refractory_steps,
        })
    }

    /// Bypass the model: inject smoothed score streams directly (oracle and
    /// fixture tests).
    pub fn from_streams(
        positives: Vec<(Vec<f64>, f64, f64)>,
        negatives: Vec<Vec<f64>>,
        negative_hours: f64,
        seconds_per_step: f64,
        refractory_steps: usize,
    ) -> Result<Self> {
        if positives.is_empty() || negative_hours <= 0.0 {
            return Err(Error::Eval("need positives and nonzero negative duration".into()));
        }
        Ok(ScoredCorpus {
            positives,
            negatives,
            negative_hours,
            seconds_per_step,
            refractory_steps,
        })
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn negative_hours(&self) -> f64 {
        self.negative_hours
    }

    fn detector_at(&self, threshold: f64) -> SmootherConfig {
        SmootherConfig {
            threshold,
            refractory_steps: self.refractory_steps,
            // scores are already smoothed; detect on them directly
            window_len: 1,
        }
    }

    /// (false alarms per hour, false rejection rate) at one threshold.
    pub fn evaluate_at(&self, threshold: f64) -> (f64, f64) {
        let cfg = self.detector_at(threshold);
        let mut misses = 0usize;
        for (scores, lo, hi) in &self.positives {
            let events = detect(scores, &cfg, self.seconds_per_step);
            let hit = events.iter().any(|e| e.time_s >= *lo && e.time_s <= *hi);
            if !hit {
                misses += 1;
            }
        }
        let frr = misses as f64 / self.positives.len() as f64;
        let false_alarms: usize = self
            .negatives
            .iter()
            .map(|scores| detect(scores, &cfg, self.seconds_per_step).len())
            .sum();
        let faph = false_alarms as f64 / self.negative_hours;
        (faph, frr)
    }
}

/// One DET operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub faph: f64,
    pub frr: f64,
}

/// Operating points swept over a strictly increasing threshold grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

impl DetCurve {
    /// FApH must never rise and FRR never fall as the threshold grows.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].faph <= w[0].faph && w[1].frr >= w[0].frr)
    }
}

/// Evenly spaced default grid: 99 thresholds over (0.01 .. 0.99).
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Sweep the cached corpus over a threshold grid.
pub fn det_curve(scored: &ScoredCorpus, grid: &[f64]) -> Result<DetCurve> {
    if grid.is_empty() {
        return Err(Error::Eval("empty threshold grid".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Eval("threshold grid must be strictly increasing".into()));
    }
    let points = grid
        .iter()
        .map(|&threshold| {
            let (faph, frr) = scored.evaluate_at(threshold);
            DetPoint { threshold, faph, frr }
        })
        .collect();
    Ok(DetCurve { points })
}

/// FRR looked up at a target FApH.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrrAtFaph {
    pub frr: f64,
    pub threshold: f64,
    /// True when no grid point reaches the target FApH; the value reported
    /// is the boundary point with the lowest FApH.
    pub clamped: bool,
}

/// Conservative step lookup (no interpolation): the smallest threshold whose
/// FApH is within the target, i.e. the best FRR subject to the constraint.
pub fn frr_at_faph(curve: &DetCurve, target_faph: f64) -> Result<FrrAtFaph> {
    if curve.points.is_empty() {
        return Err(Error::Eval("empty DET curve".into()));
    }
    match curve.points.iter().find(|p| p.faph <= target_faph) {
        Some(p) => Ok(FrrAtFaph { frr: p.frr, threshold: p.threshold, clamped: false }),
        None => {
            let p = curve
                .points
                .iter()
                .min_by(|a, b| a.faph.partial_cmp(&b.faph).unwrap())
                .expect("non-empty");
            Ok(FrrAtFaph { frr: p.frr, threshold: p.threshold, clamped: true })
        }
    }
}

/// Plot-ready CSV: `threshold,faph,frr`.
pub fn write_det_csv(path: &Path, curve: &DetCurve) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold,faph,frr")?;
    for p in &curve.points {
        writeln!(f, "{:.4},{:.6},{:.6}", p.threshold, p.faph, p.frr)?;
    }
    Ok(())
}
