//! Two-stage search: candidate weights first, architecture logits second.

use serde::{Deserialize, Serialize};

use super::gumbel::{gumbel_noise, gumbel_softmax, gumbel_softmax_backward};
use super::supernet::{penalized_loss, select, SuperNet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{diverged, CONSTRAINT_STEPS};
use crate::par;
use crate::quant::{train_admm, AdmmConfig, QuantizedModel};
use crate::rng::Rng;
use crate::sensitivity::PrecisionAssignment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSchedule {
    /// Upper bound on weight-training epochs.
    pub stage1_epochs: usize,
    /// Stage 1 stops after this many epochs without a lower training loss.
    pub stage1_patience: usize,
    pub stage2_epochs: usize,
    /// Fraction of the data held out for the architecture updates.
    pub held_out: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Gumbel samples averaged per architecture gradient.
    pub samples: usize,
    /// Weight on the complexity penalty.
    pub eta: f64,
    pub weight_lr: f64,
    pub arch_lr: f64,
    pub batch_size: usize,
    pub semi_orth_interval: usize,
    pub seed: u64,
}

impl Default for SearchSchedule {
    fn default() -> Self {
        SearchSchedule {
            stage1_epochs: 30,
            stage1_patience: 5,
            stage2_epochs: 20,
            held_out: 0.05,
            temperature_start: 5.0,
            temperature_end: 0.1,
            samples: 4,
            eta: 0.0,
            weight_lr: 0.1,
            arch_lr: 0.5,
            batch_size: 32,
            semi_orth_interval: 4,
            seed: 0,
        }
    }
}

impl SearchSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.held_out > 0.0 && self.held_out < 0.5) {
            return Err(Error::invalid(format!(
                "held-out fraction {} outside (0, 0.5)",
                self.held_out
            )));
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0)
            || !self.temperature_start.is_finite()
            || self.temperature_end > self.temperature_start
        {
            return Err(Error::invalid("temperatures must be positive and non-increasing"));
        }
        if self.samples == 0 || self.batch_size == 0 || self.semi_orth_interval == 0 {
            return Err(Error::invalid(
                "samples, batch size and constraint interval must be positive",
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!(
                "penalty weight {} must be non-negative",
                self.eta
            )));
        }
        for (name, lr) in [("weight", self.weight_lr), ("architecture", self.arch_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} learning rate {lr} must be non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Geometric annealing from the start to the end temperature.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.stage2_epochs <= 1 {
            return self.temperature_start;
        }
        let frac = epoch as f64 / (self.stage2_epochs - 1) as f64;
        self.temperature_start * (self.temperature_end / self.temperature_start).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub supernet: SuperNet,
    /// Per layer, the candidate with the largest final `log γ`.
    pub selection: Vec<usize>,
    /// `log γ` before stage 2 and after each stage-2 epoch.
    pub trajectory: Vec<Vec<Vec<f64>>>,
    /// Mean training loss of each stage-1 epoch.
    pub stage1_losses: Vec<f64>,
    /// Mean penalized held-out loss of each stage-2 epoch.
    pub stage2_losses: Vec<f64>,
    pub temperatures: Vec<f64>,
}

fn stage1(sn: &mut SuperNet, train: &Dataset, sched: &SearchSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    let counts = sn.candidate_counts();
    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 0..sched.stage1_epochs {
        let mut total = 0.0;
        let batches = train.batches(sched.batch_size, rng);
        for rows in &batches {
            let choice: Vec<usize> = counts.iter().map(|&n| rng.below(n)).collect();
            let (x, y) = train.batch(rows)?;
            let mut path = sn.path(&choice)?;
            let (loss, g) = path.loss_and_grad(&x, &y, train.segment_len)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, loss));
            }
            total += loss;
            path.apply_gradients(&g, sched.weight_lr)?;
            step += 1;
            if step % sched.semi_orth_interval == 0 {
                path.enforce_semi_orth(CONSTRAINT_STEPS)?;
            }
            for (l, &i) in choice.iter().enumerate() {
                sn.candidates[l][i] = path.layer(l).clone();
            }
        }
        let mean = total / batches.len() as f64;
        losses.push(mean);
        if mean < best {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= sched.stage1_patience {
                break;
            }
        }
    }
    Ok(losses)
}

/// `log γ` trajectory, epoch losses and temperatures.
type Stage2 = (Vec<Vec<Vec<f64>>>, Vec<f64>, Vec<f64>);

fn stage2(sn: &mut SuperNet, held: &Dataset, sched: &SearchSchedule, rng: &mut Rng) -> Result<Stage2> {
    let counts = sn.candidate_counts();
    let mut trajectory = vec![sn.log_gamma.clone()];
    let mut losses = Vec::new();
    let mut temps = Vec::new();
    for epoch in 0..sched.stage2_epochs {
        let t = sched.temperature(epoch);
        temps.push(t);
        let mut total = 0.0;
        let batches = held.batches(sched.batch_size, rng);
        for rows in &batches {
            let (x, y) = held.batch(rows)?;
            let noise: Vec<Vec<Vec<f64>>> = (0..sched.samples)
                .map(|_| counts.iter().map(|&n| gumbel_noise(n, rng)).collect())
                .collect();
            let snap = &*sn;
            let per_sample = par::map_slice(&noise, |noise| -> Result<(f64, Vec<Vec<f64>>)> {
                let lam = snap
                    .log_gamma
                    .iter()
                    .zip(noise)
                    .map(|(g, n)| gumbel_softmax(g, n, t))
                    .collect::<Result<Vec<_>>>()?;
                let (base, dl) = snap.loss_and_lambda_grad(&x, &y, &lam, held.segment_len)?;
                let loss = penalized_loss(base, &lam, &snap.costs, sched.eta)?;
                let grad = lam
                    .iter()
                    .zip(&dl)
                    .zip(&snap.costs)
                    .map(|((lam, dl), c)| {
                        let d: Vec<f64> = dl.iter().zip(c).map(|(g, c)| g + sched.eta * c).collect();
                        gumbel_softmax_backward(lam, &d, t)
                    })
                    .collect();
                Ok((loss, grad))
            });
            let scale = 1.0 / sched.samples as f64;
            for sample in per_sample {
                let (loss, grad) = sample?;
                if !loss.is_finite() {
                    return Err(diverged(epoch, loss));
                }
                total += loss * scale;
                for (lg, g) in sn.log_gamma.iter_mut().zip(&grad) {
                    for (v, d) in lg.iter_mut().zip(g) {
                        *v -= sched.arch_lr * scale * d;
                    }
                }
            }
        }
        losses.push(total / batches.len() as f64);
        trajectory.push(sn.log_gamma.clone());
    }
    Ok((trajectory, losses, temps))
}

/// Trains candidate weights on the training split with a uniformly drawn
/// single path per batch, then freezes them and moves `log γ` down the
/// penalized held-out loss, averaging the gradient over Gumbel samples.
pub fn pipelined_search(sn: &SuperNet, data: &Dataset, sched: &SearchSchedule) -> Result<SearchOutcome> {
    sched.validate()?;
    let root = Rng::new(sched.seed);
    let (train, held) = data.split(sched.held_out, &mut root.split(0))?;
    let mut sn = sn.clone();
    let stage1_losses = stage1(&mut sn, &train, sched, &mut root.split(1))?;
    let (trajectory, stage2_losses, temperatures) = stage2(&mut sn, &held, sched, &mut root.split(2))?;
    Ok(SearchOutcome {
        selection: select(trajectory.last().expect("trajectory holds the start")),
        supernet: sn,
        trajectory,
        stage1_losses,
        stage2_losses,
        temperatures,
    })
}

/// Builds the precision super-network from one quantized model per
/// candidate bit-width, costing candidate `n` of layer `l` at
/// `n · params_l` bits.
pub fn precision_supernet(models: &[QuantizedModel], bits: &[u32]) -> Result<SuperNet> {
    if models.is_empty() || models.len() != bits.len() {
        return Err(Error::invalid(format!(
            "{} pretrained models for {} bit-widths",
            models.len(),
            bits.len()
        )));
    }
    let layers = models[0].layers.len();
    let mut candidates = vec![Vec::new(); layers];
    let mut costs = vec![Vec::new(); layers];
    for (m, &b) in models.iter().zip(bits) {
        if m.layers.len() != layers {
            return Err(Error::invalid(format!(
                "pretrained {b}-bit model has {} of {layers} layers",
                m.layers.len()
            )));
        }
        for (l, q) in m.layers.iter().enumerate() {
            if q.bits() != b {
                return Err(Error::invalid(format!("missing {b}-bit candidate for layer {l}")));
            }
            candidates[l].push(q.dequantize()?);
            costs[l].push(f64::from(b) * q.param_count() as f64);
        }
    }
    SuperNet::new(candidates, costs)
}

#[derive(Debug, Clone)]
pub struct PrecisionSearch {
    pub assignment: PrecisionAssignment,
    pub search: SearchOutcome,
    pub pretrained: Vec<QuantizedModel>,
}

/// Per-layer bit-width search. Each candidate bit-width is first trained
/// with ADMM at that uniform precision; the search then only moves the
/// architecture logits.
pub fn precision_nas(
    net: &crate::model::Network,
    data: &Dataset,
    bits: &[u32],
    sched: &SearchSchedule,
    admm: &AdmmConfig,
) -> Result<PrecisionSearch> {
    if bits.is_empty() {
        return Err(Error::invalid("no candidate bit-widths"));
    }
    let params = net.layer_param_counts();
    let pretrained = bits
        .iter()
        .map(|&b| {
            let a = PrecisionAssignment::uniform(b, params.clone())?;
            Ok(train_admm(net, data, &a, admm)?.quantized)
        })
        .collect::<Result<Vec<_>>>()?;
    precision_nas_from(pretrained, data, bits, sched)
}

/// As [`precision_nas`], with the per-bit-width pretrained models supplied.
pub fn precision_nas_from(
    pretrained: Vec<QuantizedModel>,
    data: &Dataset,
    bits: &[u32],
    sched: &SearchSchedule,
) -> Result<PrecisionSearch> {
    let sn = precision_supernet(&pretrained, bits)?;
    let frozen = SearchSchedule {
        stage1_epochs: 0,
        ..sched.clone()
    };
    let search = pipelined_search(&sn, data, &frozen)?;
    let params = pretrained[0].layers.iter().map(|q| q.param_count()).collect();
    let chosen = search.selection.iter().map(|&i| bits[i]).collect();
    Ok(PrecisionSearch {
        assignment: PrecisionAssignment::new(chosen, params)?,
        search,
        pretrained,
    })
}
