use serde::{Deserialize, Serialize};

use super::layer::{FactoredLayer, LayerCache, LayerGrad, LayerSpec};
use crate::diff::Objective;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stack of factored layers; the last layer's output are the class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<FactoredLayer>,
}

/// All layer outputs of one forward pass. `activations[l]` is `h^{l+1}`;
/// the last entry holds the logits.
#[derive(Debug, Clone)]
pub struct Forward {
    pub activations: Vec<Tensor>,
}

impl Forward {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("network has at least one layer")
    }
}

/// Per-layer factor gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in &self.layers {
            v.extend_from_slice(g.a.data());
            v.extend_from_slice(g.b.data());
        }
        v
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| g.a.norm_sq() + g.b.norm_sq())
            .sum::<f64>()
            .sqrt()
    }
}

/// Softmax cross-entropy averaged over rows, and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (t, k) = (logits.rows(), logits.cols());
    if labels.len() != t {
        return Err(Error::dim(format!("{} labels for {t} rows", labels.len())));
    }
    let mut grad = vec![0.0; t * k];
    let mut loss = 0.0;
    let inv_t = 1.0 / t as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Label { label: y, classes: k });
        }
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        loss += log_z - row[y];
        for (j, g) in grad[i * k..(i + 1) * k].iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *g = (p - if j == y { 1.0 } else { 0.0 }) * inv_t;
        }
    }
    let loss = loss * inv_t;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy".into()));
    }
    Ok((loss, Tensor::matrix(t, k, grad)?))
}

impl Network {
    pub fn new(layers: Vec<FactoredLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::dim(format!(
                    "layer {} outputs {} but layer {} takes {}",
                    l,
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn init(specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(l, s)| FactoredLayer::init(s, &mut rng.split(l as u64)))
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }

    pub fn layers(&self) -> &[FactoredLayer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &FactoredLayer {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut FactoredLayer {
        &mut self.layers[l]
    }

    pub fn replace_layer(&mut self, l: usize, layer: FactoredLayer) -> Result<()> {
        if layer.spec() != self.layers[l].spec() {
            return Err(Error::dim(format!("replacement for layer {l} changes its shape")));
        }
        self.layers[l] = layer;
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(FactoredLayer::spec).collect()
    }

    /// `Σ_l (out_l·r_l + r_l·in_l)`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(FactoredLayer::param_count).sum()
    }

    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(FactoredLayer::param_count).collect()
    }

    /// Offset range of layer `l` inside [`Network::params`].
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let start: usize = self.layers[..l].iter().map(FactoredLayer::param_count).sum();
        start..start + self.layers[l].param_count()
    }

    pub fn params(&self) -> Tensor {
        let v: Vec<f64> = self.layers.iter().flat_map(FactoredLayer::params).collect();
        Tensor::from_vec(v).expect("finite parameters")
    }

    pub fn set_params(&mut self, p: &Tensor) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::dim(format!(
                "network has {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let n = layer.param_count();
            layer.set_params(&p.data()[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: &Tensor, seg_len: usize) -> Result<Vec<LayerCache>> {
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = caches.last().map_or(x, |c| &c.out);
            let cache = layer.forward_cached(input, seg_len)?;
            caches.push(cache);
        }
        Ok(caches)
    }

    /// Forward pass treating all rows of `x` as one contiguous segment.
    pub fn forward(&self, x: &Tensor) -> Result<Forward> {
        self.forward_segments(x, x.rows())
    }

    /// Forward pass where rows come in consecutive segments of `seg_len`
    /// frames; context splicing never crosses a segment boundary.
    pub fn forward_segments(&self, x: &Tensor, seg_len: usize) -> Result<Forward> {
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, seg_len)?;
            activations.push(h.clone());
        }
        Ok(Forward { activations })
    }

    pub fn logits(&self, x: &Tensor, seg_len: usize) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, seg_len)?;
        }
        Ok(h)
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize], seg_len: usize) -> Result<f64> {
        Ok(cross_entropy(&self.logits(x, seg_len)?, labels)?.0)
    }

    /// Mean cross-entropy and its exact gradient w.r.t. every factor.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[usize], seg_len: usize) -> Result<(f64, Gradients)> {
        let caches = self.forward_cached(x, seg_len)?;
        let (loss, mut d) = cross_entropy(&caches.last().unwrap().out, labels)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (g, d_in) = layer.backward(&caches[l], &d, seg_len, l > 0)?;
            grads.push(g);
            if let Some(d_in) = d_in {
                d = d_in;
            }
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    pub fn backward(&self, x: &Tensor, labels: &[usize]) -> Result<Gradients> {
        Ok(self.loss_and_grad(x, labels, x.rows())?.1)
    }

    pub fn predict(&self, x: &Tensor, seg_len: usize) -> Result<Vec<usize>> {
        Ok(self.logits(x, seg_len)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize], seg_len: usize) -> Result<f64> {
        let pred = self.predict(x, seg_len)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Applies `p ← p − lr·g` to every factor.
    pub fn apply_gradients(&mut self, g: &Gradients, lr: f64) -> Result<()> {
        for (layer, g) in self.layers.iter_mut().zip(&g.layers) {
            let (a, b) = layer.factors_mut();
            a.axpy(-lr, &g.a)?;
            b.axpy(-lr, &g.b)?;
        }
        Ok(())
    }

    pub fn semi_orth_step(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            layer.semi_orth_step()?;
        }
        Ok(())
    }

    /// Repeats [`FactoredLayer::semi_orth_step`] on every layer until the
    /// residual reaches [`SEMI_ORTH_TOL`](super::SEMI_ORTH_TOL) or
    /// `max_steps` steps were taken.
    pub fn enforce_semi_orth(&mut self, max_steps: usize) -> Result<()> {
        for layer in &mut self.layers {
            for _ in 0..max_steps {
                if layer.semi_orth_residual() <= super::SEMI_ORTH_TOL {
                    break;
                }
                layer.semi_orth_step()?;
            }
        }
        Ok(())
    }

    pub fn max_semi_orth_residual(&self) -> f64 {
        self.layers
            .iter()
            .map(FactoredLayer::semi_orth_residual)
            .fold(0.0, f64::max)
    }
}

/// The network's mean loss on a fixed batch as a function of its flat
/// parameter vector.
pub struct NetworkObjective<'a> {
    pub net: &'a Network,
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    pub seg_len: usize,
}

impl Objective for NetworkObjective<'_> {
    fn value(&self, params: &Tensor) -> Result<f64> {
        let mut net = self.net.clone();
        net.set_params(params)?;
        net.loss(self.x, self.labels, self.seg_len)
    }

    fn gradient(&self, params: &Tensor) -> Result<Tensor> {
        let mut net = self.net.clone();
        net.set_params(params)?;
        let (_, g) = net.loss_and_grad(self.x, self.labels, self.seg_len)?;
        Tensor::from_vec(g.flatten())
    }
}

/// Loss as a function of one layer's parameters, all other layers fixed.
pub struct LayerObjective<'a> {
    pub net: &'a Network,
    pub layer: usize,
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    pub seg_len: usize,
}

impl LayerObjective<'_> {
    fn with(&self, params: &Tensor) -> Result<Network> {
        let mut net = self.net.clone();
        net.layer_mut(self.layer).set_params(params.data())?;
        Ok(net)
    }
}

impl Objective for LayerObjective<'_> {
    fn value(&self, params: &Tensor) -> Result<f64> {
        self.with(params)?.loss(self.x, self.labels, self.seg_len)
    }

    fn gradient(&self, params: &Tensor) -> Result<Tensor> {
        let (_, g) = self.with(params)?.loss_and_grad(self.x, self.labels, self.seg_len)?;
        let lg = &g.layers[self.layer];
        let mut v = lg.a.data().to_vec();
        v.extend_from_slice(lg.b.data());
        Tensor::from_vec(v)
    }
}
