//! Output-distribution divergence caused by quantizing a single layer.

use crate::error::{Error, Result};
use crate::model::{sigmoid, Network};
use crate::quant::QuantizedLayer;
use crate::tensor::Tensor;

/// Per-frame distributions: sigmoid of each output, scaled to sum to one.
pub fn output_distributions(logits: &Tensor) -> Tensor {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = logits.map(sigmoid);
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// `Σ_t KL(p_t ‖ q_t)` over the rows of two distribution matrices.
pub fn summed_kl(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::dim(format!("kl: {:?} vs {:?}", p.shape(), q.shape())));
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| if a == b { 0.0 } else { a * (a / b).ln() })
        .sum();
    if !total.is_finite() {
        return Err(Error::Numeric("kl divergence is not finite".into()));
    }
    // rounding can leave a tiny negative sum when p and q nearly coincide
    Ok(total.max(0.0))
}

/// Divergence between the outputs of `net` and of `net` with only layer
/// `layer` quantized at `bits`, summed over the frames of `frames`.
pub fn kl_sensitivity(net: &Network, layer: usize, bits: u32, frames: &Tensor, seg_len: usize) -> Result<f64> {
    let reference = output_distributions(&net.logits(frames, seg_len)?);
    kl_against(net, &reference, layer, bits, frames, seg_len)
}

pub(crate) fn kl_against(
    net: &Network,
    reference: &Tensor,
    layer: usize,
    bits: u32,
    frames: &Tensor,
    seg_len: usize,
) -> Result<f64> {
    if frames.rows() == 0 {
        return Err(Error::invalid("no evaluation frames"));
    }
    if layer >= net.num_layers() {
        return Err(Error::invalid(format!("layer {layer} of {}", net.num_layers())));
    }
    let mut quantized = net.clone();
    quantized.replace_layer(layer, QuantizedLayer::fit(layer, net.layer(layer), bits)?.dequantize()?)?;
    let q = output_distributions(&quantized.logits(frames, seg_len)?);
    summed_kl(reference, &q)
}
