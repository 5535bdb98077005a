use serde::{Deserialize, Serialize};

use super::scale::optimize_scale;
use super::table::QuantTable;
use crate::error::{Error, Result};
use crate::model::{FactoredLayer, LayerSpec, Network};
use crate::par;
use crate::sensitivity::PrecisionAssignment;
use crate::tensor::Tensor;

/// One layer's factors stored as codes of a shared table. `codes` holds `A`
/// then `B`, row-major; the dequantized value of code `c` is `α·c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub cluster: usize,
    pub spec: LayerSpec,
    pub table: QuantTable,
    pub codes: Vec<i32>,
}

impl QuantizedLayer {
    pub fn new(cluster: usize, spec: LayerSpec, table: QuantTable, codes: Vec<i32>) -> Result<Self> {
        if codes.len() != spec.param_count() {
            return Err(Error::dim(format!(
                "{} codes for a layer with {} parameters",
                codes.len(),
                spec.param_count()
            )));
        }
        if let Some(&c) = codes.iter().find(|&&c| !table.contains_code(c)) {
            return Err(Error::invalid(format!(
                "code {c} outside the {}-bit table",
                table.bits()
            )));
        }
        Ok(QuantizedLayer {
            cluster,
            spec,
            table,
            codes,
        })
    }

    /// Quantizes both factors of `layer` with one fitted table.
    pub fn fit(cluster: usize, layer: &FactoredLayer, bits: u32) -> Result<Self> {
        let fit = optimize_scale(&layer.params(), bits)?;
        QuantizedLayer::new(cluster, layer.spec(), fit.table, fit.codes)
    }

    /// Quantizes `layer` with a given table (no scale fitting).
    pub fn with_table(cluster: usize, layer: &FactoredLayer, table: QuantTable) -> Result<Self> {
        let codes = table.quantize_slice(&layer.params());
        QuantizedLayer::new(cluster, layer.spec(), table, codes)
    }

    pub fn bits(&self) -> u32 {
        self.table.bits()
    }

    pub fn param_count(&self) -> usize {
        self.codes.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.table.value(c)).collect()
    }

    pub fn dequantize(&self) -> Result<FactoredLayer> {
        let s = &self.spec;
        let v = self.values();
        let na = s.out_dim * s.bottleneck;
        let a = Tensor::matrix(s.out_dim, s.bottleneck, v[..na].to_vec())?;
        let b = Tensor::matrix(s.bottleneck, s.spliced_in_dim(), v[na..].to_vec())?;
        FactoredLayer::new(a, b, s.activation, s.context.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    pub fn dequantize(&self) -> Result<Network> {
        Network::new(
            self.layers
                .iter()
                .map(QuantizedLayer::dequantize)
                .collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn bits(&self) -> Vec<u32> {
        self.layers.iter().map(QuantizedLayer::bits).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.table.alpha()).collect()
    }

    pub fn assignment(&self) -> PrecisionAssignment {
        PrecisionAssignment::new(
            self.bits(),
            self.layers.iter().map(QuantizedLayer::param_count).collect(),
        )
        .expect("layers carry valid bit-widths")
    }
}

fn check_assignment(net: &Network, assignment: &PrecisionAssignment) -> Result<()> {
    if assignment.len() != net.num_layers() {
        return Err(Error::invalid(format!(
            "assignment covers {} of {} layers",
            assignment.len(),
            net.num_layers()
        )));
    }
    if assignment.params() != net.layer_param_counts().as_slice() {
        return Err(Error::invalid("assignment parameter counts differ from the network"));
    }
    Ok(())
}

/// Replaces every parameter with its nearest level in a per-layer table
/// whose scale is fitted to that layer. Layers are fitted in parallel.
pub fn quantize_model(net: &Network, assignment: &PrecisionAssignment) -> Result<QuantizedModel> {
    check_assignment(net, assignment)?;
    let layers = par::map_indexed(net.num_layers(), |l| {
        QuantizedLayer::fit(l, net.layer(l), assignment.bits()[l])
    });
    Ok(QuantizedModel {
        layers: layers.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Quantizes with fixed tables, one per layer.
pub fn quantize_with_tables(net: &Network, tables: &[QuantTable]) -> Result<QuantizedModel> {
    if tables.len() != net.num_layers() {
        return Err(Error::invalid(format!(
            "{} tables for {} layers",
            tables.len(),
            net.num_layers()
        )));
    }
    let layers = net
        .layers()
        .iter()
        .zip(tables)
        .enumerate()
        .map(|(l, (layer, &t))| QuantizedLayer::with_table(l, layer, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::rng::Rng;

    fn net(seed: u64) -> Network {
        let specs = [
            LayerSpec {
                out_dim: 8,
                in_dim: 5,
                bottleneck: 3,
                activation: Activation::Relu,
                context: vec![],
            },
            LayerSpec {
                out_dim: 3,
                in_dim: 8,
                bottleneck: 3,
                activation: Activation::Identity,
                context: vec![],
            },
        ];
        Network::init(&specs, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn one_bit_weights_are_signed_scale() {
        let n = net(0);
        let a = PrecisionAssignment::uniform(1, n.layer_param_counts()).unwrap();
        let q = quantize_model(&n, &a).unwrap();
        for layer in &q.layers {
            let alpha = layer.table.alpha();
            assert!(layer.values().iter().all(|&v| v == alpha || v == -alpha));
        }
    }

    #[test]
    fn quantizing_twice_is_bit_exact() {
        for seed in 0..10 {
            let n = net(seed);
            for bits in [1, 2, 4, 8, 16] {
                let a = PrecisionAssignment::uniform(bits, n.layer_param_counts()).unwrap();
                let once = quantize_model(&n, &a).unwrap().dequantize().unwrap();
                let twice = quantize_model(&once, &a).unwrap().dequantize().unwrap();
                assert_eq!(once, twice, "seed {seed} bits {bits}");
            }
        }
    }

    #[test]
    fn values_lie_on_the_grid() {
        let n = net(3);
        let a = PrecisionAssignment::new(vec![4, 8], n.layer_param_counts()).unwrap();
        let q = quantize_model(&n, &a).unwrap();
        let deq = q.dequantize().unwrap();
        for (l, layer) in q.layers.iter().enumerate() {
            let expect: Vec<f64> = layer.codes.iter().map(|&c| layer.table.alpha() * c as f64).collect();
            assert_eq!(deq.layer(l).params(), expect);
        }
    }

    #[test]
    fn missing_layer_is_an_error() {
        let n = net(0);
        let a = PrecisionAssignment::new(vec![4], vec![n.layer_param_counts()[0]]).unwrap();
        assert!(quantize_model(&n, &a).is_err());
    }
}
