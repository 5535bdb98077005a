//! Factored feed-forward networks.

mod layer;
mod network;
mod train;

pub(crate) use layer::LayerCache;
pub use layer::{
    semi_orth_residual, sigmoid, splice, unsplice, Activation, FactoredLayer, LayerGrad, LayerSpec, SEMI_ORTH_TOL,
};
pub use network::{cross_entropy, Forward, Gradients, LayerObjective, Network, NetworkObjective};
pub(crate) use train::{diverged, epoch_loop};
pub use train::{train, TrainConfig, TrainOutcome, CONSTRAINT_STEPS};
