//! Differentiable architecture search over per-layer candidates.

mod gumbel;
mod search;
mod supernet;

pub use gumbel::{entropy, gumbel_noise, gumbel_softmax, gumbel_softmax_backward, gumbel_weights};
pub use search::{
    pipelined_search, precision_nas, precision_nas_from, precision_supernet, PrecisionSearch, SearchOutcome,
    SearchSchedule,
};
pub use supernet::{penalized_loss, select, SuperNet};
