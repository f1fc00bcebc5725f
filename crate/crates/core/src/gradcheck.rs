//! Central finite-difference gradient checks in 64-bit precision.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `max |analytic - numeric| / max(max |analytic|, max |numeric|)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `eps` on every input element.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &leaves)?;
    tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, t)| l.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let consts: Vec<Var<f64>> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &consts)?.value().item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut max_diff = 0.0f64;
        let mut max_a = 0.0f64;
        let mut max_n = 0.0f64;
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        let scale = max_a.max(max_n);
        rel_errors.push(if scale == 0.0 { max_diff } else { max_diff / scale });
    }
    Ok(GradCheck { rel_errors })
}

/// Reduces a tensor to a scalar through fixed pseudo-random weights so that
/// every output element contributes to the checked gradient.
pub fn project(tape: &Tape<f64>, y: &Var<f64>, salt: u64) -> Result<Var<f64>> {
    let w = Tensor::from_fn(y.shape(), |i| {
        let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    });
    let w = tape.constant(w);
    let prod = tape.mul(y, &w)?;
    Ok(tape.sum(&prod))
}
