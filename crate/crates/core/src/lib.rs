//! Weakly and semi-supervised temporal action localization with predicted
//! per-snippet thresholds.
//!
//! A small scoring network maps a `T x D` snippet feature sequence to `C`
//! action score columns plus one threshold column. Training compares the two
//! through a soft gate, and inference binarizes the very same gate, so the
//! localization rule is identical at training and test time.
//!
//! Module map:
//!
//! - [`data`]: video samples, the on-disk dataset format, annotation
//!   rasterization and clip cropping.
//! - [`synth`]: synthetic datasets with planted action segments.
//! - [`network`]: the scoring network, gates and analytic backward pass.
//! - [`objectives`]: pooling, class probabilities and the three losses.
//! - [`trainer`]: Adam training loop with weak/semi/full supervision.
//! - [`localizer`]: gate binarization, class selection and detections.
//! - [`evaluator`]: detection mAP over IoU thresholds.
//! - [`gradcheck`]: finite-difference verification of every gradient path.

pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod io;
pub mod localizer;
pub mod network;
pub mod objectives;
pub mod synth;
pub mod trainer;

pub use data::{Dataset, DatasetManifest, GroundTruthSegment, RasterizedAnnotation, VideoSample};
pub use error::{Error, Result};
pub use evaluator::{evaluate, EvalReport};
pub use localizer::{infer_video, Detection, InferenceMode};
pub use network::{GatingKind, NetworkParams, ScoreMap};
pub use objectives::{Aggregator, LossConfig, RegForm};
pub use synth::SynthSpec;
pub use trainer::{run_training, TrainConfig, TrainState};

/// Seconds per snippet when a record does not say otherwise: 16 frames at 25 fps.
pub const DEFAULT_SNIPPET_DURATION: f64 = 0.64;
