//! Hessian-trace weighted quantization error.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::{hvp, Objective};
use crate::error::{Error, Result};
use crate::model::{LayerObjective, Network};
use crate::par;
use crate::quant::optimize_scale;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub probes: usize,
}

/// Hutchinson estimate of `Tr(H)` at `params` from Rademacher probes.
/// Probe `k` draws from `rng.split(k)`, so the estimate does not depend on
/// how probes are scheduled.
pub fn hutchinson_trace(obj: &impl Objective, params: &Tensor, probes: usize, rng: &Rng) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::invalid("at least one probe required"));
    }
    let samples = par::map_indexed(probes, |k| {
        let mut r = rng.split(k as u64);
        let v = Tensor::new(
            params.shape().to_vec(),
            (0..params.len()).map(|_| r.rademacher()).collect(),
        )?;
        let hv = hvp(obj, params, &v)?;
        let s = v.dot(&hv)?;
        if s.is_finite() {
            Ok(s)
        } else {
            Err(Error::Numeric(format!("probe {k} gave {s}")))
        }
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std_error = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        mean,
        std_error,
        probes,
    })
}

/// Trace of the loss Hessian restricted to layer `layer`'s parameters.
pub fn layer_trace(net: &Network, layer: usize, data: &Dataset, probes: usize, rng: &Rng) -> Result<TraceEstimate> {
    if layer >= net.num_layers() {
        return Err(Error::invalid(format!("layer {layer} of {}", net.num_layers())));
    }
    let obj = LayerObjective {
        net,
        layer,
        x: &data.x,
        labels: &data.labels,
        seg_len: data.segment_len,
    };
    let p = net.layer(layer).params();
    hutchinson_trace(&obj, &Tensor::from_vec(p)?, probes, rng)
}

/// `max(trace, 0) · squared_error`.
pub fn curvature_score(trace: f64, squared_error: f64) -> f64 {
    trace.max(0.0) * squared_error
}

pub fn curvature_sensitivity(
    net: &Network,
    layer: usize,
    bits: u32,
    data: &Dataset,
    probes: usize,
    rng: &Rng,
) -> Result<f64> {
    let trace = layer_trace(net, layer, data, probes, rng)?;
    let fit = optimize_scale(&net.layer(layer).params(), bits)?;
    Ok(curvature_score(trace.mean, fit.l2_error))
}
