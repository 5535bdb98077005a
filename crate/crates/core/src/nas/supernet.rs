//! Super-network: every layer is a weighted mixture of candidate layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy, FactoredLayer, LayerCache, LayerSpec, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperNet {
    /// `candidates[l][i]`: candidate `i` of layer `l`.
    pub candidates: Vec<Vec<FactoredLayer>>,
    /// Architecture logits `log γ`, one per candidate.
    pub log_gamma: Vec<Vec<f64>>,
    /// Complexity `C` of each candidate.
    pub costs: Vec<Vec<f64>>,
}

impl SuperNet {
    pub fn new(candidates: Vec<Vec<FactoredLayer>>, costs: Vec<Vec<f64>>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("super-network needs at least one layer"));
        }
        if costs.len() != candidates.len() {
            return Err(Error::dim("one cost row per layer required"));
        }
        let mut prev_out = None;
        for (l, (cands, cost)) in candidates.iter().zip(&costs).enumerate() {
            let first = cands
                .first()
                .ok_or_else(|| Error::invalid(format!("layer {l} has no candidates")))?;
            if cost.len() != cands.len() {
                return Err(Error::dim(format!(
                    "layer {l}: {} costs for {} candidates",
                    cost.len(),
                    cands.len()
                )));
            }
            if cost.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid(format!("layer {l} has a non-finite cost")));
            }
            for c in cands {
                if c.out_dim() != first.out_dim() || c.in_dim() != first.in_dim() || c.context() != first.context() {
                    return Err(Error::dim(format!("layer {l} candidates differ in shape or context")));
                }
            }
            if let Some(out) = prev_out {
                if first.in_dim() != out {
                    return Err(Error::dim(format!(
                        "layer {l} expects {} inputs, previous gives {out}",
                        first.in_dim()
                    )));
                }
            }
            prev_out = Some(first.out_dim());
        }
        let log_gamma = candidates.iter().map(|c| vec![0.0; c.len()]).collect();
        Ok(SuperNet {
            candidates,
            log_gamma,
            costs,
        })
    }

    /// Bottleneck search: candidate `i` of layer `l` is a fresh layer with
    /// bottleneck `choices[l][i]`, costed by its parameter count.
    pub fn for_bottlenecks(specs: &[LayerSpec], choices: &[Vec<usize>], rng: &mut Rng) -> Result<Self> {
        if specs.len() != choices.len() {
            return Err(Error::dim("one choice list per layer required"));
        }
        let mut candidates = Vec::with_capacity(specs.len());
        let mut costs = Vec::with_capacity(specs.len());
        for (l, (spec, rs)) in specs.iter().zip(choices).enumerate() {
            let layer_rng = rng.split(l as u64);
            let cands = rs
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    let s = LayerSpec {
                        bottleneck: r,
                        ..spec.clone()
                    };
                    FactoredLayer::init(&s, &mut layer_rng.split(i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            costs.push(cands.iter().map(|c| c.param_count() as f64).collect());
            candidates.push(cands);
        }
        SuperNet::new(candidates, costs)
    }

    pub fn num_layers(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidate_counts(&self) -> Vec<usize> {
        self.candidates.iter().map(Vec::len).collect()
    }

    /// The single-path network choosing `selection[l]` in layer `l`.
    pub fn path(&self, selection: &[usize]) -> Result<Network> {
        if selection.len() != self.num_layers() {
            return Err(Error::dim("one choice per layer required"));
        }
        let layers = selection
            .iter()
            .zip(&self.candidates)
            .map(|(&i, c)| {
                c.get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("candidate {i} of {}", c.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }

    /// Per layer, the index of the largest `log γ` (lowest index on ties).
    pub fn selection(&self) -> Vec<usize> {
        select(&self.log_gamma)
    }

    fn check_lambda(&self, lambda: &[Vec<f64>]) -> Result<()> {
        if lambda.len() != self.num_layers() || lambda.iter().zip(&self.candidates).any(|(a, c)| a.len() != c.len()) {
            return Err(Error::dim("mixture weights do not match candidate counts"));
        }
        Ok(())
    }

    /// `h^l = Σ_i λ_i^l φ_i^l(W_i^l h^{l−1})`. Candidates with zero weight are
    /// skipped, so a one-hot mixture reproduces the single path exactly.
    pub fn forward(&self, x: &Tensor, lambda: &[Vec<f64>], seg_len: usize) -> Result<Tensor> {
        self.check_lambda(lambda)?;
        let mut h = x.clone();
        for (cands, lam) in self.candidates.iter().zip(lambda) {
            let mut next: Option<Tensor> = None;
            for (c, &w) in cands.iter().zip(lam) {
                if w == 0.0 {
                    continue;
                }
                let out = c.forward(&h, seg_len)?;
                next = Some(match next {
                    None => out.scale(w),
                    Some(mut acc) => {
                        acc.axpy(w, &out)?;
                        acc
                    }
                });
            }
            h = next.ok_or_else(|| Error::invalid("a layer has all-zero mixture weights"))?;
        }
        Ok(h)
    }

    /// Mean cross-entropy of the mixture and its gradient with respect to
    /// every mixture weight. Candidate weights are not differentiated.
    pub fn loss_and_lambda_grad(
        &self,
        x: &Tensor,
        labels: &[usize],
        lambda: &[Vec<f64>],
        seg_len: usize,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_lambda(lambda)?;
        let mut caches: Vec<Vec<Option<LayerCache>>> = Vec::with_capacity(self.num_layers());
        let mut h = x.clone();
        for (cands, lam) in self.candidates.iter().zip(lambda) {
            let mut row = Vec::with_capacity(cands.len());
            let mut next: Option<Tensor> = None;
            for (c, &w) in cands.iter().zip(lam) {
                if w == 0.0 {
                    row.push(None);
                    continue;
                }
                let cache = c.forward_cached(&h, seg_len)?;
                next = Some(match next {
                    None => cache.out.scale(w),
                    Some(mut acc) => {
                        acc.axpy(w, &cache.out)?;
                        acc
                    }
                });
                row.push(Some(cache));
            }
            caches.push(row);
            h = next.ok_or_else(|| Error::invalid("a layer has all-zero mixture weights"))?;
        }
        let (loss, mut d) = cross_entropy(&h, labels)?;
        let mut grads = vec![Vec::new(); self.num_layers()];
        for l in (0..self.num_layers()).rev() {
            let mut g = vec![0.0; self.candidates[l].len()];
            let mut d_in: Option<Tensor> = None;
            for (i, cache) in caches[l].iter().enumerate() {
                let Some(cache) = cache else { continue };
                g[i] = d.dot(&cache.out)?;
                if l > 0 {
                    let (_, di) = self.candidates[l][i].backward(cache, &d.scale(lambda[l][i]), seg_len, true)?;
                    let di = di.expect("input gradient requested");
                    d_in = Some(match d_in {
                        None => di,
                        Some(mut acc) => {
                            acc.axpy(1.0, &di)?;
                            acc
                        }
                    });
                }
            }
            grads[l] = g;
            if let Some(di) = d_in {
                d = di;
            }
        }
        Ok((loss, grads))
    }
}

/// Per layer, the index of the largest value (lowest index on ties).
pub fn select(log_gamma: &[Vec<f64>]) -> Vec<usize> {
    log_gamma
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

/// `base + η Σ_{l,i} λ_i^l C_i^l`.
pub fn penalized_loss(base: f64, lambda: &[Vec<f64>], costs: &[Vec<f64>], eta: f64) -> Result<f64> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!(
            "penalty weight must be non-negative, got {eta}"
        )));
    }
    if lambda.len() != costs.len() || lambda.iter().zip(costs).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::dim("mixture weights do not match costs"));
    }
    let penalty: f64 = lambda
        .iter()
        .zip(costs)
        .map(|(l, c)| l.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let total = base + eta * penalty;
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::Numeric(format!("penalized loss is {total}")))
    }
}
