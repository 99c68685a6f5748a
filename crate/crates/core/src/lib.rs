//! Monocular depth-classification toolkit for airborne obstacle avoidance.
//!
//! The crate covers the full desk-scale pipeline: ordinal depth-mask
//! synthesis from bounding-box + distance annotations, a from-scratch
//! autodiff engine, a small U-Net trained with a weighted hybrid loss
//! (edge / SSIM / L1 / BerHu) under Adam with a warmup schedule, and the
//! sliding-window / threshold-accuracy evaluation metrics.

pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod gradcheck;
pub mod io;
pub mod graph;
pub mod grid;
pub mod ops;
pub mod tensor;

pub use dataset::{AnnotatedFrame, BBox, ClassBins, SynthParams};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Op, Var};
pub use grid::{Image, Mask};
pub use losses::{LossWeights, SsimConfig};
pub use metrics::{Aggregator, EvalSample, MetricReport, SlidingWindowCfg};
pub use model::{Model, ModelConfig};
pub use optim::{AdamConfig, AdamState, WarmupSchedule};
pub use pipeline::{EvalConfig, Predictor, TrainConfig};
pub use ops::PadMode;
pub use tensor::{Real, Tensor};
