//! Per-output-step binary targets, expanded around the keyword end.
//!
//! A positive clip is annotated at a single end-of-keyword frame; that one
//! positive output step is replicated `before` steps earlier and `after`
//! steps later to soften the extreme class imbalance.

use crate::error::{Error, Result};

/// Binary target per model output step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    targets: Vec<bool>,
}

impl LabelSequence {
    /// Wrap explicit targets (the expansion path is [`expand_labels`]).
    pub fn from_targets(targets: Vec<bool>) -> Self {
        LabelSequence { targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn num_positive(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }
}

/// Build the expanded label sequence for a clip of `num_frames` input frames.
///
/// The model emits one step per `step_size` frames (`I = ⌊T/P⌋`). The
/// annotated end frame maps to step `i* = ⌊end/P⌋`; steps in
/// `[i*−before, i*+after] ∩ [0, I−1]` become positive. No annotation means
/// all-negative targets.
pub fn expand_labels(
    keyword_end_frame: Option<usize>,
    num_frames: usize,
    step_size: usize,
    before: usize,
    after: usize,
) -> Result<LabelSequence> {
    let steps = num_frames / step_size;
    if steps == 0 {
        return Err(Error::InvalidArgument {
            op: "expand_labels",
            msg: format!("{num_frames} frames yield no output steps at step size {step_size}"),
        });
    }
    let mut targets = vec![false; steps];
    if let Some(end) = keyword_end_frame {
        if end >= num_frames {
            return Err(Error::Usage(format!(
                "keyword end frame {end} outside clip of {num_frames} frames"
            )));
        }
        let center = end / step_size;
        let lo = center.saturating_sub(before);
        let hi = (center + after).min(steps - 1);
        for t in targets.iter_mut().take(hi + 1).skip(lo.min(steps)) {
            *t = true;
        }
    }
    Ok(LabelSequence { targets })
}
