//! Sensitivity of every (layer, bit-width) cell.

use serde::{Deserialize, Serialize};

use super::curvature::{curvature_score, layer_trace};
use super::kl::{kl_against, output_distributions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::par;
use crate::quant::{check_bits, optimize_scale};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Kl,
    Hessian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub metric: Metric,
    /// Candidate bit-widths, ascending.
    pub bits: Vec<u32>,
    /// `entries[l][j]` is the sensitivity of layer `l` at `bits[j]`.
    pub entries: Vec<Vec<f64>>,
    /// Frames (KL) or probes (Hessian) per cell.
    pub samples: usize,
}

impl SensitivityTable {
    pub fn new(metric: Metric, bits: Vec<u32>, entries: Vec<Vec<f64>>, samples: usize) -> Result<Self> {
        check_candidates(&bits)?;
        for (l, row) in entries.iter().enumerate() {
            if row.len() != bits.len() {
                return Err(Error::invalid(format!(
                    "layer {l} has {} entries for {} candidates",
                    row.len(),
                    bits.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::invalid(format!("layer {l} has sensitivity {v}")));
            }
        }
        Ok(SensitivityTable {
            metric,
            bits,
            entries,
            samples,
        })
    }

    pub fn layers(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, layer: usize, bits: u32) -> Option<f64> {
        let j = self.bits.iter().position(|&b| b == bits)?;
        self.entries.get(layer).map(|row| row[j])
    }
}

fn check_candidates(bits: &[u32]) -> Result<()> {
    if bits.is_empty() {
        return Err(Error::invalid("no candidate bit-widths"));
    }
    for &b in bits {
        check_bits(b)?;
    }
    if bits.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("candidate bit-widths must be strictly ascending"));
    }
    Ok(())
}

fn cells(layers: usize, candidates: usize) -> Vec<(usize, usize)> {
    (0..layers).flat_map(|l| (0..candidates).map(move |j| (l, j))).collect()
}

fn collect(layers: usize, candidates: usize, flat: Vec<f64>) -> Vec<Vec<f64>> {
    debug_assert_eq!(flat.len(), layers * candidates);
    flat.chunks(candidates).map(<[f64]>::to_vec).collect()
}

/// KL sensitivity of every cell, evaluated on all frames of `frames`.
pub fn kl_table(net: &Network, frames: &Dataset, bits: &[u32]) -> Result<SensitivityTable> {
    check_candidates(bits)?;
    if frames.is_empty() {
        return Err(Error::invalid("no evaluation frames"));
    }
    let reference = output_distributions(&net.logits(&frames.x, frames.segment_len)?);
    let cells = cells(net.num_layers(), bits.len());
    let flat = par::map_slice(&cells, |&(l, j)| {
        kl_against(net, &reference, l, bits[j], &frames.x, frames.segment_len)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    SensitivityTable::new(
        Metric::Kl,
        bits.to_vec(),
        collect(net.num_layers(), bits.len(), flat),
        frames.len(),
    )
}

/// Curvature sensitivity of every cell. The trace is estimated once per
/// layer, with layer `l` drawing its probes from `Rng::new(seed).split(l)`.
pub fn hessian_table(
    net: &Network,
    data: &Dataset,
    bits: &[u32],
    probes: usize,
    seed: u64,
) -> Result<SensitivityTable> {
    check_candidates(bits)?;
    let root = Rng::new(seed);
    let traces = par::map_indexed(net.num_layers(), |l| {
        layer_trace(net, l, data, probes, &root.split(l as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let cells = cells(net.num_layers(), bits.len());
    let flat = par::map_slice(&cells, |&(l, j)| {
        let fit = optimize_scale(&net.layer(l).params(), bits[j])?;
        Ok(curvature_score(traces[l].mean, fit.l2_error))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    SensitivityTable::new(
        Metric::Hessian,
        bits.to_vec(),
        collect(net.num_layers(), bits.len(), flat),
        probes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerSpec};

    fn setup() -> (Network, Dataset) {
        let data = crate::data::blobs(&crate::data::BlobsSpec {
            classes: 3,
            dim: 4,
            per_class: 20,
            separation: 3.0,
            seed: 1,
        })
        .unwrap();
        let specs = [
            LayerSpec {
                out_dim: 6,
                in_dim: 4,
                bottleneck: 3,
                activation: Activation::Relu,
                context: vec![],
            },
            LayerSpec {
                out_dim: 3,
                in_dim: 6,
                bottleneck: 3,
                activation: Activation::Identity,
                context: vec![],
            },
        ];
        (Network::init(&specs, &mut Rng::new(1)).unwrap(), data)
    }

    #[test]
    fn tables_are_complete_and_non_negative() {
        let (net, data) = setup();
        let bits = [1, 2, 4, 8, 16];
        for t in [
            kl_table(&net, &data, &bits).unwrap(),
            hessian_table(&net, &data, &bits, 16, 0).unwrap(),
        ] {
            assert_eq!(t.layers(), 2);
            assert!(t.entries.iter().flatten().all(|&v| v >= 0.0));
            assert_eq!(t.get(1, 16), Some(t.entries[1][4]));
            assert_eq!(t.get(1, 3), None);
        }
    }

    #[test]
    fn same_result_on_any_pool() {
        let (net, data) = setup();
        let bits = [2, 4];
        let a = par::with_jobs(1, || hessian_table(&net, &data, &bits, 8, 3).unwrap());
        let b = par::with_jobs(3, || hessian_table(&net, &data, &bits, 8, 3).unwrap());
        assert_eq!(a, b);
        let a = par::with_jobs(1, || kl_table(&net, &data, &bits).unwrap());
        let b = par::with_jobs(3, || kl_table(&net, &data, &bits).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_candidates_and_entries() {
        let (net, data) = setup();
        assert!(kl_table(&net, &data, &[4, 2]).is_err());
        assert!(kl_table(&net, &data, &[]).is_err());
        assert!(SensitivityTable::new(Metric::Kl, vec![2, 4], vec![vec![0.1]], 1).is_err());
        assert!(SensitivityTable::new(Metric::Kl, vec![2], vec![vec![-0.1]], 1).is_err());
    }
}
