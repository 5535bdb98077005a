use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Upper bound on semi-orthogonalisation steps per constraint application.
pub const CONSTRAINT_STEPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// SGD steps between applications of the semi-orthogonal constraint.
    pub semi_orth_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            semi_orth_interval: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.semi_orth_interval == 0 {
            return Err(Error::invalid("batch size and semi-orth interval must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    /// Full-dataset loss before training, then after every epoch.
    pub losses: Vec<f64>,
    /// Largest `‖B·Bᵀ − I‖_F` over layers after each constraint application.
    pub semi_orth_residuals: Vec<f64>,
}

/// Visits shuffled mini-batches for `epochs` epochs, calling `step` with
/// the batch and the global step index, and `end_epoch` after each epoch.
pub(crate) fn epoch_loop(
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut step: impl FnMut(&Tensor, &[usize], usize) -> Result<()>,
    mut end_epoch: impl FnMut(usize) -> Result<()>,
) -> Result<()> {
    let mut count = 0;
    for epoch in 0..cfg.epochs {
        for rows in data.batches(cfg.batch_size, rng) {
            let (x, y) = data.batch(&rows)?;
            count += 1;
            step(&x, &y, count)?;
        }
        end_epoch(epoch)?;
    }
    Ok(())
}

pub(crate) fn diverged(epoch: usize, loss: f64) -> Error {
    Error::Training {
        epoch,
        reason: format!("loss became {loss}"),
    }
}

/// Plain mini-batch SGD on mean cross-entropy, applying the semi-orthogonal
/// constraint every `semi_orth_interval` steps (up to [`CONSTRAINT_STEPS`]
/// iterations each time).
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut net = net.clone();
    let mut rng = Rng::new(cfg.seed);
    let mut losses = vec![data.loss(&net)?];
    let mut residuals = Vec::new();
    let seg = data.segment_len;
    let lr = cfg.learning_rate;
    let shared = std::cell::RefCell::new(&mut net);
    epoch_loop(
        data,
        cfg,
        &mut rng,
        |x, y, count| {
            let mut net = shared.borrow_mut();
            let (loss, g) = net.loss_and_grad(x, y, seg).map_err(|e| match e {
                Error::Numeric(_) => diverged(0, f64::NAN),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(0, loss));
            }
            net.apply_gradients(&g, lr)?;
            if count % cfg.semi_orth_interval == 0 {
                net.enforce_semi_orth(CONSTRAINT_STEPS)?;
                residuals.push(net.max_semi_orth_residual());
            }
            Ok(())
        },
        |epoch| {
            let net = shared.borrow();
            let loss = data.loss(&net).unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(diverged(epoch, loss));
            }
            losses.push(loss);
            Ok(())
        },
    )?;
    Ok(TrainOutcome {
        net,
        losses,
        semi_orth_residuals: residuals,
    })
}
