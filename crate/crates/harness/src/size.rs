//! Byte accounting for full-precision and quantized models.
//!
//! Full precision stores every parameter as a 32-bit float. A quantized
//! checkpoint stores a fixed header, then per layer the dimensions, the
//! bit-width, the scale and the packed codes; see [`crate::checkpoint`].

use mpq_core::model::Network;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, HEADER_BYTES, LAYER_OVERHEAD_BYTES};
use crate::error::{HarnessError, Result};

pub const FP_BYTES_PER_PARAM: u64 = 4;
pub const BYTES_PER_MB: f64 = 1e6;

/// A bare parameter count, sized at full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount(pub u64);

pub trait ModelSize {
    fn size_bytes(&self) -> u64;
}

impl ModelSize for ParamCount {
    fn size_bytes(&self) -> u64 {
        self.0 * FP_BYTES_PER_PARAM
    }
}

impl ModelSize for Network {
    fn size_bytes(&self) -> u64 {
        ParamCount(self.param_count() as u64).size_bytes()
    }
}

impl ModelSize for Checkpoint {
    fn size_bytes(&self) -> u64 {
        self.encoded_len() as u64
    }
}

pub fn model_size_bytes(model: &impl ModelSize) -> u64 {
    model.size_bytes()
}

pub fn megabytes(bytes: u64) -> f64 {
    round1(bytes as f64 / BYTES_PER_MB)
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// `baseline / compressed`, to one decimal.
pub fn compression_ratio(baseline: f64, compressed: f64) -> Result<f64> {
    if !(baseline > 0.0 && compressed > 0.0 && baseline.is_finite() && compressed.is_finite()) {
        return Err(HarnessError::Size(format!(
            "compression ratio needs positive sizes, got {baseline} / {compressed}"
        )));
    }
    Ok(round1(baseline / compressed))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSize {
    pub bits: u32,
    pub params: u64,
    pub code_bytes: u64,
    pub overhead_bytes: u64,
}

impl LayerSize {
    pub fn bytes(&self) -> u64 {
        self.code_bytes + self.overhead_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    pub header_bytes: u64,
    pub total_bytes: u64,
    pub full_precision_bytes: u64,
    pub compression_ratio: f64,
    pub avg_bits_weighted: f64,
    pub avg_bits_unweighted: f64,
}

impl SizeReport {
    /// Sizes a model with `bits[l]`-bit codes for the `params[l]` weights of
    /// layer `l`, laid out as a checkpoint without shadow weights.
    pub fn from_bits(params: &[u64], bits: &[u32]) -> Result<Self> {
        if params.len() != bits.len() {
            return Err(HarnessError::Size(format!(
                "{} parameter counts for {} bit-widths",
                params.len(),
                bits.len()
            )));
        }
        let layers: Vec<LayerSize> = params
            .iter()
            .zip(bits)
            .map(|(&p, &b)| LayerSize {
                bits: b,
                params: p,
                code_bytes: (p * u64::from(b)).div_ceil(8),
                overhead_bytes: LAYER_OVERHEAD_BYTES as u64,
            })
            .collect();
        let header_bytes = HEADER_BYTES as u64;
        let total_bytes = header_bytes + layers.iter().map(LayerSize::bytes).sum::<u64>();
        let total_params: u64 = params.iter().sum();
        let full_precision_bytes = ParamCount(total_params).size_bytes();
        let weighted = params
            .iter()
            .zip(bits)
            .map(|(&p, &b)| p as f64 * f64::from(b))
            .sum::<f64>();
        let n = bits.len().max(1) as f64;
        Ok(SizeReport {
            compression_ratio: compression_ratio(full_precision_bytes as f64, total_bytes as f64).unwrap_or(0.0),
            avg_bits_weighted: if total_params == 0 {
                0.0
            } else {
                weighted / total_params as f64
            },
            avg_bits_unweighted: bits.iter().map(|&b| f64::from(b)).sum::<f64>() / n,
            layers,
            header_bytes,
            total_bytes,
            full_precision_bytes,
        })
    }

    /// Shadow weights, if stored, are not counted.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params: Vec<u64> = ckpt.layers.iter().map(|l| l.param_count() as u64).collect();
        let bits: Vec<u32> = ckpt.layers.iter().map(|l| u32::from(l.bits)).collect();
        SizeReport::from_bits(&params, &bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_precision_megabytes() {
        assert_eq!(megabytes(model_size_bytes(&ParamCount(18_600_000))), 74.4);
        assert_eq!(megabytes(model_size_bytes(&ParamCount(12_400_000))), 49.6);
    }

    #[test]
    fn ratios() {
        assert_eq!(compression_ratio(180.4, 13.3).unwrap(), 13.6);
        assert_eq!(compression_ratio(74.4, 49.6).unwrap(), 1.5);
        assert_eq!(compression_ratio(5.0, 5.0).unwrap(), 1.0);
        assert!(compression_ratio(1.0, 0.0).is_err());
        assert!(compression_ratio(0.0, 1.0).is_err());
    }

    #[test]
    fn empty_model_is_header_only() {
        let r = SizeReport::from_bits(&[], &[]).unwrap();
        assert_eq!(r.total_bytes, HEADER_BYTES as u64);
        assert_eq!(r.full_precision_bytes, 0);
        let ckpt = Checkpoint {
            layers: vec![],
            shadow: None,
        };
        assert_eq!(model_size_bytes(&ckpt), HEADER_BYTES as u64);
    }

    #[test]
    fn itemized_totals() {
        let r = SizeReport::from_bits(&[1000, 3], &[4, 1]).unwrap();
        assert_eq!(r.layers[0].code_bytes, 500);
        assert_eq!(r.layers[1].code_bytes, 1);
        assert_eq!(r.total_bytes, 10 + 21 + 500 + 21 + 1);
        assert_eq!(r.full_precision_bytes, 4012);
        assert!((r.avg_bits_weighted - 4003.0 / 1003.0).abs() < 1e-12);
        assert_eq!(r.avg_bits_unweighted, 2.5);
    }
}
