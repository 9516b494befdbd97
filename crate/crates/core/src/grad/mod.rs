//! Reverse-mode differentiation over a closed set of tensor primitives.

mod check;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use check::{gradcheck_suite, standard_cases, Case, GradcheckResult, GRADCHECK_TOL, PROBES_PER_INPUT};
pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC};
pub use params::{adam_step, AdamConfig, ParamSet, Parameter};
pub use tape::{mode_index, ExternalOp, Gradients, Tape, Var};
pub use tensor::Tensor;
