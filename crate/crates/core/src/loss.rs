use crate::contraction::ScaledVector;
use crate::error::{FttnError, Result};

/// Cross-entropy of the softmax of the logits `values * exp(log_scale)`
/// against `label`, with the gradient with respect to those logits.
pub fn softmax_cross_entropy(scores: &ScaledVector, label: usize) -> Result<(f64, Vec<f64>)> {
    let v = &scores.logits();
    if label >= v.len() {
        return Err(FttnError::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(FttnError::NonFinite(format!(
            "class logits overflow (log scale {})",
            scores.log_scale
        )));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = max + sum.ln() - v[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}
