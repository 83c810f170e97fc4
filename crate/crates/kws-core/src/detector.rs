//! Trigger decisions: trailing-mean smoothing of the posterior stream and
//! threshold comparison with a refractory period.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherConfig {
    /// Posterior steps averaged by the trailing window.
    pub window_len: usize,
    /// Trigger threshold s.
    pub threshold: f64,
    /// Steps suppressed after a trigger (75 steps ≈ 3 s at 25 steps/s).
    pub refractory_steps: usize,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig { window_len: 10, threshold: 0.5, refractory_steps: 75 }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 1 {
            return Err(Error::Config("window_len must be ≥ 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0,1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// A fired trigger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    /// Output-step index the trigger fired at.
    pub step: usize,
    /// `step · seconds_per_step`.
    pub time_s: f64,
    /// Smoothed score at the trigger step.
    pub score: f64,
}

/// Trailing (causal) mean: `ỹ_i` averages `ŷ` over
/// `[max(0, i − window + 1), i]`, partial at the start.
pub fn smooth(posteriors: &[f64], window_len: usize) -> Vec<f64> {
    let w = window_len.max(1);
    let mut out = Vec::with_capacity(posteriors.len());
    for i in 0..posteriors.len() {
        let lo = (i + 1).saturating_sub(w);
        let mut s = 0.0;
        for &y in &posteriors[lo..=i] {
            s += y;
        }
        out.push(s / (i - lo + 1) as f64);
    }
    out
}

/// Threshold the smoothed stream: an event fires at the first step at or
/// above `threshold`, then the gate closes for `refractory_steps`.
pub fn detect(
    smoothed: &[f64],
    cfg: &SmootherConfig,
    seconds_per_step: f64,
) -> Vec<DetectionEvent> {
    let mut events = Vec::new();
    let mut last: Option<usize> = None;
    for (i, &score) in smoothed.iter().enumerate() {
        let open = last.map_or(true, |l| i - l >= cfg.refractory_steps.max(1));
        if score >= cfg.threshold && open {
            events.push(DetectionEvent { step: i, time_s: i as f64 * seconds_per_step, score });
            last = Some(i);
        }
    }
    events
}

/// Streaming twin of [`smooth`]: push one posterior, get the smoothed value.
/// Recomputes the window sum in ascending order, matching the batch path
/// exactly.
#[derive(Debug, Clone)]
pub struct StreamingSmoother {
    window: VecDeque<f64>,
    window_len: usize,
}

impl StreamingSmoother {
    pub fn new(window_len: usize) -> Self {
        StreamingSmoother { window: VecDeque::new(), window_len: window_len.max(1) }
    }

    pub fn push(&mut self, posterior: f64) -> f64 {
        self.window.push_back(posterior);
        if self.window.len() > self.window_len {
            self.window.pop_front();
        }
        let mut s = 0.0;
        for &y in &self.window {
            s += y;
        }
        s / self.window.len() as f64
    }

    pub fn reset(&mut self) {
        self.window.clear();
    }
}

/// Streaming twin of [`detect`].
#[derive(Debug, Clone)]
pub struct TriggerGate {
    cfg: SmootherConfig,
    seconds_per_step: f64,
    step: usize,
    last: Option<usize>,
}

impl TriggerGate {
    pub fn new(cfg: SmootherConfig, seconds_per_step: f64) -> Self {
        TriggerGate { cfg, seconds_per_step, step: 0, last: None }
    }

    pub fn push(&mut self, smoothed: f64) -> Option<DetectionEvent> {
        let i = self.step;
        self.step += 1;
        let open = self.last.map_or(true, |l| i - l >= self.cfg.refractory_steps.max(1));
        if smoothed >= self.cfg.threshold && open {
            self.last = Some(i);
            return Some(DetectionEvent {
                step: i,
                time_s: i as f64 * self.seconds_per_step,
                score: smoothed,
            });
        }
        None
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.last = None;
    }
}

/// Event log across streams: CSV `stream_id,step,time_s,score`.
pub fn write_events_csv(
    path: &std::path::Path,
    streams: &[(String, Vec<DetectionEvent>)],
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "stream_id,step,time_s,score")?;
    for (id, events) in streams {
        for e in events {
            writeln!(f, "{id},{},{:.3},{:.6}", e.step, e.time_s, e.score)?;
        }
    }
    Ok(())
}
