//! Two-arm CNN inference: a bit-packed binarized network answers first and
//! hands low-confidence inputs to an 8-bit fixed-point network.

pub mod bnn;
pub mod cascade;
pub mod error;
pub mod float_ref;
pub mod golden;
pub mod idx;
pub mod int8;
pub mod model;
pub mod perf;
pub mod synthetic;
pub mod tensor;

pub use cascade::{evaluate_batch, infer, sweep_ct, BatchReport, CascadeConfig, Prediction, Source, SweepRow};
pub use error::{Error, FormatError, Result};
pub use idx::Dataset;
pub use model::{CoopModel, ModelGraph};
pub use perf::{memory_report, LatencyProfile, MemoryReport};
pub use tensor::{BitTensor, FloatTensor, QuantTensor, Shape};
