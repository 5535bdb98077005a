//! Layer sensitivity measures and bit allocation.

mod allocate;
mod assignment;
mod curvature;
mod kl;
mod table;

pub use allocate::{allocate_bits, total_sensitivity};
pub use assignment::PrecisionAssignment;
pub use curvature::{curvature_score, curvature_sensitivity, hutchinson_trace, layer_trace, TraceEstimate};
pub use kl::{kl_sensitivity, output_distributions, summed_kl};
pub use table::{hessian_table, kl_table, Metric, SensitivityTable};
