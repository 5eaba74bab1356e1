//! Measuring the output-sequence frequency bias of recurrent networks.
//!
//! The crate generates sparse prefix-classification datasets over the binary
//! alphabet `{a, b}`, trains Elman, LSTM and GRU networks on them from scratch
//! with full-batch BPTT and Adam, and characterizes what the trained networks
//! predict on the unlabelled prefixes through the dominant frequency of their
//! output signal.
//!
//! The numeric core is generic over the scalar type ([`Scalar`], implemented
//! for `f32` and `f64`). The aliases at the crate root pin the `f64`
//! instantiation used by the experiment harness.

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use analysis::{DominantFrequency, Spectrum, TestLoss};
pub use datagen::{BinarySequence, LabelAssignment, Symbol, TrainDataset, TrainEntry};
pub use harness::{AggregateRow, ExperimentConfig, GridPoint, RunRecord};
pub use models::{Architecture, CellKind, OutputSignal, Parameters, RnnModel};
pub use numerics::{Matrix, RngStream};
pub use training::{AdamState, TrainConfig, TrainReport};

/// Double precision matrix.
pub type Matrix64 = Matrix<f64>;
/// Single precision matrix.
pub type Matrix32 = Matrix<f32>;
/// Double precision recurrent model, the instantiation used by the harness.
pub type Model = RnnModel<f64>;
/// Single precision recurrent model.
pub type Model32 = RnnModel<f32>;
pub type Params = Parameters<f64>;
pub type Signal = OutputSignal<f64>;
pub type Spectrum64 = Spectrum<f64>;
pub type Adam = AdamState<f64>;
pub type Report = TrainReport<f64>;
