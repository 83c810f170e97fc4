//! Finite-difference verification of tape gradients.
//!
//! The check evaluates a user-supplied scalar function twice per perturbed
//! coordinate (central differences) and never touches the reverse sweep, so
//! it stays an independent oracle for `Tape::backward`.

use crate::error::Result;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Real, Tensor};

/// Worst observed relative error of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a scale floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` builds a scalar output from the tape and the leaf ids it is handed;
/// every input in `inputs` is registered as a trainable leaf. `step` is the
/// half-width of the central difference.
pub fn check_gradients<T: Real>(
    inputs: &[Tensor<T>],
    step: f64,
    f: impl Fn(&mut Tape<T>, &[ValueId]) -> Result<ValueId>,
) -> Result<GradReport> {
    // Analytic gradients from one taped evaluation.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<T>> =
        ids.iter().map(|&id| tape.grad(id).expect("leaf gradient").to_vec()).collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).data()[0].as_f64())
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = orig + T::of(step);
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - T::of(step);
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = analytic[ti][j].as_f64();
            max_rel = max_rel.max(rel_err(an, fd));
            checked += 1;
        }
    }
    Ok(GradReport { max_rel_err: max_rel, checked })
}
