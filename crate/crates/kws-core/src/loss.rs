//! Focal loss over per-step posteriors.
//!
//! `FL(p_t) = −α_t · (1−p_t)^γ · ln(p_t)` with
//! `p_t = y·ŷ + (1−y)·(1−ŷ)`, reduced by the mean over steps.
//!
//! Which side α weights is configurable: the standard convention puts α on
//! the positive class, so the default `alpha = 0.1` down-weights positives
//! relative to negatives. Flip `alpha_on_positive` for the other reading.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelSequence;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Real, Tensor};

/// Guards `ln(p_t)` against saturated posteriors.
const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalLossConfig {
    /// Class weight in `[0, 1]`.
    pub alpha: f64,
    /// Focusing exponent, ≥ 0. Zero recovers (α-weighted) cross entropy.
    pub gamma: f64,
    /// True: positives weigh α, negatives 1−α. False: the reverse.
    pub alpha_on_positive: bool,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig { alpha: 0.1, gamma: 1.0, alpha_on_positive: true }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        Ok(())
    }

    fn weight<T: Real>(&self, positive: bool) -> T {
        let a = if positive == self.alpha_on_positive { self.alpha } else { 1.0 - self.alpha };
        T::of(a)
    }
}

/// Focal loss of taped posteriors against a label sequence; differentiable
/// through the tape. `posteriors` may be shaped `[I]` or `[I, 1]`.
pub fn focal_loss<T: Real>(
    tape: &mut Tape<T>,
    posteriors: ValueId,
    labels: &LabelSequence,
    cfg: &FocalLossConfig,
) -> Result<ValueId> {
    cfg.validate()?;
    let n = tape.value(posteriors).numel();
    if n != labels.len() {
        return Err(Error::Usage(format!(
            "{} posteriors vs {} labels",
            n,
            labels.len()
        )));
    }
    let shape = tape.value(posteriors).shape().to_vec();
    let y: Vec<T> =
        labels.targets().iter().map(|&t| if t { T::one() } else { T::zero() }).collect();
    let one_minus_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let alpha_t: Vec<T> = labels.targets().iter().map(|&t| cfg.weight(t)).collect();

    let y = tape.leaf(Tensor::new(shape.clone(), y)?);
    let one_minus_y = tape.leaf(Tensor::new(shape.clone(), one_minus_y)?);
    let alpha_t = tape.leaf(Tensor::new(shape, alpha_t)?);

    // p_t = y·ŷ + (1−y)·(1−ŷ), floored before the log
    let neg = tape.mul_scalar(posteriors, -T::one());
    let one_minus_yhat = tape.add_scalar(neg, T::one());
    let pos_term = tape.mul(y, posteriors)?;
    let neg_term = tape.mul(one_minus_y, one_minus_yhat)?;
    let p = tape.add(pos_term, neg_term)?;
    let p = tape.max_scalar(p, T::of(P_FLOOR));

    // α_t · (1−p)^γ · (−ln p)
    let neg_p = tape.mul_scalar(p, -T::one());
    let one_minus_p = tape.add_scalar(neg_p, T::one());
    let focus = tape.pow_scalar(one_minus_p, T::of(cfg.gamma));
    let log_p = tape.ln(p);
    let nll = tape.mul_scalar(log_p, -T::one());
    let per_step = tape.mul(focus, nll)?;
    let per_step = tape.mul(alpha_t, per_step)?;
    Ok(tape.mean_all(per_step))
}

/// Convenience: loss value for plain posterior slices (no gradients kept).
pub fn focal_loss_value<T: Real>(
    posteriors: &[T],
    labels: &LabelSequence,
    cfg: &FocalLossConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![posteriors.len()], posteriors.to_vec())?);
    let loss = focal_loss(&mut tape, p, labels, cfg)?;
    Ok(tape.value(loss).data()[0])
}
