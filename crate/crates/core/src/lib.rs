//! Temporal point process forecasting of hyperedge events in dynamic
//! hypergraphs: dynamic node representations, attention-based hyperedge
//! intensities, likelihood training with Monte-Carlo survival estimation,
//! and type/time prediction with MRR/MAE evaluation.

pub mod checkpoint;
pub mod data;
pub mod dynamics;
pub mod encoders;
pub mod evaluation;
pub mod registry;
pub mod tensor;
pub mod tpp;
pub mod training;

pub use tensor::{finite_difference_check, Gradients, Op, ParamId, ParamSet, Tape, Tensor};
pub use tpp::{EventRecord, Hyperedge, IntensityFn};
