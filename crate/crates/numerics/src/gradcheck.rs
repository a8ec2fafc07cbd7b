//! Central finite-difference oracle for checking tape gradients.
//!
//! The oracle only evaluates the forward pass, so it stays independent of
//! the adjoint code it checks.

use std::sync::Arc;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest elementwise mismatch found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
/// amplifying roundoff in the difference quotient.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` against central differences with `step`.
///
/// `f` builds a scalar loss from one trainable leaf per input tensor.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(Arc::new(t.clone()))).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");

    let eval = |perturbed: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs).item()
    };

    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.data()[e];
            let r = rel_err(a, numeric, 1e-3);
            if r > worst.max_rel_err {
                worst = GradCheckReport {
                    max_rel_err: r,
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    worst
}
