//! Cycle-level simulation of a non-blocking simultaneous multithreading
//! (NB-SMT) systolic array running 8-bit quantized CNN inference.
//!
//! The pieces, bottom up: [`squeeze`] holds the per-PE arithmetic,
//! [`gemm`] lowers layers to matrix products and counts cycles, [`engine`]
//! runs whole graphs, and [`recalib`], [`prune`] and [`sweep`] sit on top.

pub mod dataset;
pub mod engine;
pub mod error;
pub mod gemm;
pub mod model;
mod par;
pub mod prune;
pub mod quant;
pub mod recalib;
pub mod squeeze;
pub mod sweep;
pub mod tensor;

pub use dataset::{load_dataset, sample_calibration_subset, DatasetFormat, LabeledDataset};
pub use engine::{top1_accuracy, Engine, EngineOptions, Evaluation, ExecutionMode, ForwardOptions};
pub use error::{Error, Result};
pub use gemm::{ArrayConfig, CycleReport, ThreadConfig};
pub use model::{load_model, save_model, LayerGraph};
pub use par::Parallelism;
pub use quant::{calibrate, QuantParams};
pub use recalib::{recalibrate, RecalibPlan};
pub use squeeze::ThreadCount;
pub use tensor::Tensor;
