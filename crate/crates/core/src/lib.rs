//! Local higher-order statistics (LHS) image descriptors: differential
//! vectors around each pixel, a diagonal Gaussian mixture over them, and
//! per-cell Fisher-score encodings. Also provides LBP/LTP baselines, a
//! learned pair metric, a linear SVM and an evaluation harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod codec;
pub mod classify;
pub mod encoder;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod math;
pub mod metric;
pub mod patterns;
pub mod raster;
pub mod synth;

pub use classify::{EvalReport, LinearSvmModel};
pub use encoder::{Descriptor, DescriptorKind, Grid, WhiteningStats};
pub use error::{Error, Result};
pub use gmm::{GmmModel, TrainConfig};
pub use harness::{AggregateReport, Dataset, Manifest, PipelineConfig, Protocol};
pub use metric::{MetricModel, PairLabel, SgdConfig};
pub use patterns::PatternKind;
pub use raster::{DiffVector, GrayImage, Preprocess, Roi, SamplingMode};
pub use synth::TextureSpec;
