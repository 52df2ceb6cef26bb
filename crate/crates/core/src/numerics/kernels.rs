//! Detached scalar kernels shared by the graph ops and the inference paths.

use crate::error::{NarvidError, Result};

/// Norm guard used by every cosine in the engine.
pub const NORM_EPS: f64 = 1e-8;

/// `softmax(x / tau)`, computed with the max-shift for stability.
pub fn softmax_temp(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(NarvidError::Numeric(format!("softmax temperature must be positive, got {tau}")));
    }
    if x.is_empty() {
        return Err(NarvidError::Shape("softmax of an empty vector".into()));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(NarvidError::Numeric(format!("softmax input contains {v}")));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a·b / (max(|a|, eps) · max(|b|, eps))`; a zero vector scores 0 against anything.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NarvidError::Shape(format!("cosine of vectors with dimensions {} and {}", a.len(), b.len())));
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(NORM_EPS) * norm(b).max(NORM_EPS))
}

/// `log Σ exp(x)`, max-shifted.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Population mean and standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
