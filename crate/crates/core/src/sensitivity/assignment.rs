use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::check_bits;

/// Bit-width per layer together with each layer's parameter count. Averages
/// are always recomputed from these two vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionAssignment {
    bits: Vec<u32>,
    params: Vec<usize>,
}

impl PrecisionAssignment {
    pub fn new(bits: Vec<u32>, params: Vec<usize>) -> Result<Self> {
        if bits.len() != params.len() {
            return Err(Error::dim(format!(
                "{} bit-widths for {} layers",
                bits.len(),
                params.len()
            )));
        }
        for &b in &bits {
            check_bits(b)?;
        }
        Ok(PrecisionAssignment { bits, params })
    }

    pub fn uniform(bits: u32, params: Vec<usize>) -> Result<Self> {
        PrecisionAssignment::new(vec![bits; params.len()], params)
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn params(&self) -> &[usize] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `Σ_l params_l · bits_l`.
    pub fn total_bits(&self) -> u64 {
        self.bits
            .iter()
            .zip(&self.params)
            .map(|(&b, &p)| b as u64 * p as u64)
            .sum()
    }

    /// Parameter-weighted average bit-width (what the model size follows).
    pub fn weighted_avg_bits(&self) -> f64 {
        let p: usize = self.params.iter().sum();
        if p == 0 {
            return 0.0;
        }
        self.total_bits() as f64 / p as f64
    }

    /// Plain mean of the per-layer bit-widths.
    pub fn unweighted_avg_bits(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
    }
}
