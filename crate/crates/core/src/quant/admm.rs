//! ADMM training towards per-layer quantization grids.
//!
//! Scaled form: the weights `θ` are trained on `loss + (ρ/2)‖θ − q + u‖²`,
//! then `q` is projected onto the grid of `θ + u` with a refitted scale and
//! the dual is updated as `u ← u + θ − q`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::model::{quantize_with_tables, QuantizedModel};
use super::scale::optimize_scale;
use super::table::{check_bits, QuantTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{diverged, epoch_loop, Network, TrainConfig};
use crate::par;
use crate::rng::Rng;
use crate::sensitivity::PrecisionAssignment;
use crate::tensor::Tensor;

/// A residual above this fraction of the previous one counts as stagnation.
const STAGNATION: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RhoSchedule {
    Fixed(f64),
    /// `0.01 · mean|∇loss| / mean|θ|` at the start, halved whenever the
    /// primal residual stagnates.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    /// One ADMM iteration per epoch.
    pub train: TrainConfig,
    pub rho: RhoSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub u: Tensor,
    pub rho: f64,
    /// Grid-constrained copy of the weights.
    pub q: Tensor,
    pub tables: Vec<QuantTable>,
    ranges: Vec<Range<usize>>,
    bits: Vec<u32>,
}

impl AdmmState {
    /// Starts from `u = 0` and `q` the projection of `θ`.
    pub fn new(theta: &Tensor, ranges: Vec<Range<usize>>, bits: Vec<u32>, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be positive, got {rho}")));
        }
        if ranges.len() != bits.len() {
            return Err(Error::invalid("one bit-width per cluster required"));
        }
        for &b in &bits {
            check_bits(b)?;
        }
        let mut end = 0;
        for r in &ranges {
            if r.start != end || r.end <= r.start {
                return Err(Error::invalid("clusters must tile the parameter vector"));
            }
            end = r.end;
        }
        if end != theta.len() {
            return Err(Error::dim(format!(
                "clusters cover {end} of {} parameters",
                theta.len()
            )));
        }
        let mut state = AdmmState {
            u: Tensor::zeros(&[theta.len()]),
            rho,
            q: Tensor::zeros(&[theta.len()]),
            tables: Vec::new(),
            ranges,
            bits,
        };
        state.project(theta)?;
        Ok(state)
    }

    /// `ρ (θ − q + u)`, the gradient of the augmented term.
    pub fn penalty_gradient(&self, theta: &Tensor) -> Result<Tensor> {
        Ok(theta.sub(&self.q)?.add(&self.u)?.scale(self.rho))
    }

    pub fn primal_residual(&self, theta: &Tensor) -> Result<f64> {
        Ok(theta.sub(&self.q)?.norm())
    }

    /// Refits each cluster's scale to `θ + u` and snaps it to the grid.
    fn project(&mut self, theta: &Tensor) -> Result<()> {
        let target = theta.add(&self.u)?;
        let fits = par::map_indexed(self.ranges.len(), |l| {
            optimize_scale(&target.data()[self.ranges[l].clone()], self.bits[l])
        });
        let mut q = Vec::with_capacity(theta.len());
        self.tables.clear();
        for fit in fits {
            let fit = fit?;
            q.extend(fit.dequantized());
            self.tables.push(fit.table);
        }
        self.q = Tensor::from_vec(q)?;
        Ok(())
    }

    /// The q-update followed by the dual update. Returns `‖θ − q‖`.
    pub fn update(&mut self, theta: &Tensor) -> Result<f64> {
        self.project(theta)?;
        self.u = self.u.add(&theta.sub(&self.q)?)?;
        if !self.u.all_finite() {
            return Err(Error::Numeric("ADMM dual diverged".into()));
        }
        self.primal_residual(theta)
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    /// The grid-constrained copy at the end of training.
    pub quantized: QuantizedModel,
    /// Full-precision weights at the end of training.
    pub weights: Network,
    pub state: AdmmState,
    /// Primal residual after each iteration.
    pub residuals: Vec<f64>,
    /// `ρ` used in each iteration.
    pub rhos: Vec<f64>,
}

fn default_rho(net: &Network, data: &Dataset) -> Result<f64> {
    let (_, g) = net.loss_and_grad(&data.x, &data.labels, data.segment_len)?;
    let g = g.flatten();
    let theta = net.params();
    let mean_g = g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
    let mean_t = theta.data().iter().map(|v| v.abs()).sum::<f64>() / theta.len() as f64;
    let rho = 0.01 * mean_g / mean_t;
    if rho > 0.0 && rho.is_finite() {
        Ok(rho)
    } else {
        Err(Error::Numeric(format!(
            "cannot derive a default rho from mean gradient {mean_g} and mean weight {mean_t}"
        )))
    }
}

pub fn train_admm(
    net: &Network,
    data: &Dataset,
    assignment: &PrecisionAssignment,
    cfg: &AdmmConfig,
) -> Result<AdmmOutcome> {
    cfg.train.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if assignment.params() != net.layer_param_counts().as_slice() {
        return Err(Error::invalid("assignment does not match the network layers"));
    }
    let rho = match cfg.rho {
        RhoSchedule::Fixed(r) => r,
        RhoSchedule::Auto => default_rho(net, data)?,
    };
    let ranges = (0..net.num_layers()).map(|l| net.layer_range(l)).collect();
    let mut weights = net.clone();
    let state = AdmmState::new(&weights.params(), ranges, assignment.bits().to_vec(), rho)?;
    let state = std::cell::RefCell::new(state);
    let weights_cell = std::cell::RefCell::new(&mut weights);
    let mut residuals = Vec::new();
    let mut rhos = Vec::new();
    let lr = cfg.train.learning_rate;
    let seg = data.segment_len;
    let mut rng = Rng::new(cfg.train.seed);
    epoch_loop(
        data,
        &cfg.train,
        &mut rng,
        |x, y, _| {
            let mut w = weights_cell.borrow_mut();
            let s = state.borrow();
            let (loss, g) = w.loss_and_grad(x, y, seg)?;
            if !loss.is_finite() {
                return Err(diverged(0, loss));
            }
            let theta = w.params();
            let grad = Tensor::from_vec(g.flatten())?.add(&s.penalty_gradient(&theta)?)?;
            let mut theta = theta;
            theta.axpy(-lr, &grad)?;
            w.set_params(&theta)?;
            Ok(())
        },
        |epoch| {
            let w = weights_cell.borrow();
            let mut s = state.borrow_mut();
            rhos.push(s.rho);
            let r = s.update(&w.params()).map_err(|_| diverged(epoch, f64::NAN))?;
            if !r.is_finite() {
                return Err(diverged(epoch, r));
            }
            if cfg.rho == RhoSchedule::Auto {
                if let Some(&prev) = residuals.last() {
                    if r > STAGNATION * prev {
                        s.rho *= 0.5;
                    }
                }
            }
            residuals.push(r);
            Ok(())
        },
    )?;
    let state = state.into_inner();
    let mut on_grid = net.clone();
    on_grid.set_params(&state.q)?;
    let quantized = quantize_with_tables(&on_grid, &state.tables)?;
    Ok(AdmmOutcome {
        quantized,
        weights,
        state,
        residuals,
        rhos,
    })
}
