//! Numerically stable log-domain helpers.

use crate::error::{NumericsError, Result};

/// `log(sum(exp(x)))` with max-shift.
///
/// Negative infinity entries are allowed as masks; at least one entry must be
/// finite.
pub fn logsumexp(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(NumericsError::Domain("logsumexp of empty input".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v.is_nan() || v == f64::INFINITY {
            return Err(NumericsError::Domain(format!(
                "logsumexp input must be finite or -inf, got {v}"
            )));
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::Domain(
            "logsumexp of all negative-infinity input".into(),
        ));
    }
    let s: f64 = x.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + s.ln())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::Domain(
            "log_softmax requires finite logits".into(),
        ));
    }
    let lse = logsumexp(logits)?;
    Ok(logits.iter().map(|&v| v - lse).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
