//! Gumbel-softmax relaxation of a categorical choice.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Standard Gumbel noise `−ln(−ln U)`, `U ~ U(0, 1)`.
pub fn gumbel_noise(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| -(-rng.uniform_open().ln()).ln()).collect()
}

/// `softmax((log γ + G) / T)` with the noise `G` given.
pub fn gumbel_softmax(log_gamma: &[f64], noise: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if log_gamma.len() != noise.len() || log_gamma.is_empty() {
        return Err(Error::dim(format!(
            "{} logits with {} noise draws",
            log_gamma.len(),
            noise.len()
        )));
    }
    let z: Vec<f64> = log_gamma
        .iter()
        .zip(noise)
        .map(|(g, n)| (g + n) / temperature)
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numeric("non-finite architecture logits".into()));
    }
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Draws fresh noise and returns the relaxed weights.
pub fn gumbel_weights(log_gamma: &[f64], temperature: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let noise = gumbel_noise(log_gamma.len(), rng);
    gumbel_softmax(log_gamma, &noise, temperature)
}

/// Pulls `∂L/∂λ` back to `∂L/∂log γ` for fixed noise:
/// `∂L/∂log γ_k = λ_k (g_k − Σ_i λ_i g_i) / T`.
pub fn gumbel_softmax_backward(lambda: &[f64], d_lambda: &[f64], temperature: f64) -> Vec<f64> {
    let mean: f64 = lambda.iter().zip(d_lambda).map(|(l, g)| l * g).sum();
    lambda
        .iter()
        .zip(d_lambda)
        .map(|(l, g)| l * (g - mean) / temperature)
        .collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}
