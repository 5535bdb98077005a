//! Symmetric uniform quantization and quantized training.

mod admm;
mod model;
mod scale;
mod ste;
mod table;

pub use admm::{train_admm, AdmmConfig, AdmmOutcome, AdmmState, RhoSchedule};
pub use model::{quantize_model, quantize_with_tables, QuantizedLayer, QuantizedModel};
pub use scale::{initial_alpha, optimize_scale, ScaleFit};
pub use ste::{ste_step, train_modified_bp, train_qat, QuantTrainOutcome};
pub use table::{check_bits, max_code, QuantTable, SUPPORTED_BITS};
