//! Straight-through training of quantized networks.
//!
//! Both schemes keep full-precision shadow weights. The forward pass runs on
//! the quantized weights and the gradient with respect to those quantized
//! weights is applied to the shadow copy unchanged, i.e. the quantizer is
//! treated as the identity in the backward pass.

use std::cell::RefCell;

use super::model::{quantize_model, quantize_with_tables, QuantizedModel};
use super::table::QuantTable;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{diverged, epoch_loop, Network, TrainConfig, CONSTRAINT_STEPS};
use crate::rng::Rng;
use crate::sensitivity::PrecisionAssignment;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct QuantTrainOutcome {
    pub shadow: Network,
    pub quantized: QuantizedModel,
    /// Training loss of the quantized network before training, then after
    /// each epoch.
    pub losses: Vec<f64>,
}

/// One straight-through SGD step on `shadow`. Returns the batch loss of the
/// quantized network.
pub fn ste_step(
    shadow: &mut Network,
    tables: &[QuantTable],
    x: &Tensor,
    labels: &[usize],
    seg_len: usize,
    lr: f64,
) -> Result<f64> {
    let effective = quantize_with_tables(shadow, tables)?.dequantize()?;
    let (loss, g) = effective.loss_and_grad(x, labels, seg_len)?;
    shadow.apply_gradients(&g, lr)?;
    Ok(loss)
}

fn quantized_loss(q: &QuantizedModel, data: &Dataset) -> Result<f64> {
    data.loss(&q.dequantize()?)
}

fn tables_of(q: &QuantizedModel) -> Vec<QuantTable> {
    q.layers.iter().map(|l| l.table).collect()
}

enum Scheme {
    /// Tables fitted once to the starting weights.
    FixedTables,
    /// Tables refitted after every epoch. The best quantized model on the
    /// training data is kept, comparing each epoch's model both with the
    /// tables it was trained against and with the refitted ones.
    RefitEachEpoch,
}

fn run(
    net: &Network,
    data: &Dataset,
    assignment: &PrecisionAssignment,
    cfg: &TrainConfig,
    scheme: Scheme,
) -> Result<QuantTrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let start = quantize_model(net, assignment)?;
    let start_loss = quantized_loss(&start, data)?;
    let state = RefCell::new(State {
        shadow: net.clone(),
        tables: tables_of(&start),
        best: (start_loss, start.clone(), net.clone()),
        losses: vec![start_loss],
    });
    let mut rng = Rng::new(cfg.seed);
    let seg = data.segment_len;
    epoch_loop(
        data,
        cfg,
        &mut rng,
        |x, y, count| {
            let mut s = state.borrow_mut();
            let State { shadow, tables, .. } = &mut *s;
            let loss = ste_step(shadow, tables, x, y, seg, cfg.learning_rate)?;
            if !loss.is_finite() {
                return Err(diverged(0, loss));
            }
            if count % cfg.semi_orth_interval == 0 {
                shadow.enforce_semi_orth(CONSTRAINT_STEPS)?;
            }
            Ok(())
        },
        |epoch| {
            let mut s = state.borrow_mut();
            let q = match scheme {
                Scheme::FixedTables => quantize_with_tables(&s.shadow, &s.tables)?,
                Scheme::RefitEachEpoch => {
                    let trained = quantize_with_tables(&s.shadow, &s.tables)?;
                    let lt = quantized_loss(&trained, data).map_err(|_| diverged(epoch, f64::NAN))?;
                    if lt < s.best.0 {
                        s.best = (lt, trained, s.shadow.clone());
                    }
                    let q = quantize_model(&s.shadow, assignment)?;
                    s.tables = tables_of(&q);
                    q
                }
            };
            let loss = quantized_loss(&q, data).map_err(|_| diverged(epoch, f64::NAN))?;
            s.losses.push(loss);
            if loss < s.best.0 {
                s.best = (loss, q, s.shadow.clone());
            }
            Ok(())
        },
    )?;
    let s = state.into_inner();
    match scheme {
        Scheme::FixedTables => {
            let quantized = quantize_with_tables(&s.shadow, &s.tables)?;
            Ok(QuantTrainOutcome {
                shadow: s.shadow,
                quantized,
                losses: s.losses,
            })
        }
        Scheme::RefitEachEpoch => {
            let (_, quantized, shadow) = s.best;
            Ok(QuantTrainOutcome {
                shadow,
                quantized,
                losses: s.losses,
            })
        }
    }
}

struct State {
    shadow: Network,
    tables: Vec<QuantTable>,
    best: (f64, QuantizedModel, Network),
    losses: Vec<f64>,
}

/// Modified back-propagation: quantized forward pass, full-precision
/// update, with per-layer tables fitted once to the starting weights.
pub fn train_modified_bp(
    net: &Network,
    data: &Dataset,
    assignment: &PrecisionAssignment,
    cfg: &TrainConfig,
) -> Result<QuantTrainOutcome> {
    run(net, data, assignment, cfg, Scheme::FixedTables)
}

/// Quantization-aware fine-tuning of a trained network. Same straight-through
/// updates as [`train_modified_bp`], but each layer's scale is refitted after
/// every epoch, and the returned model is the quantized snapshot (the
/// starting offline quantization included) with the lowest training loss.
pub fn train_qat(
    net: &Network,
    data: &Dataset,
    assignment: &PrecisionAssignment,
    cfg: &TrainConfig,
) -> Result<QuantTrainOutcome> {
    run(net, data, assignment, cfg, Scheme::RefitEachEpoch)
}
