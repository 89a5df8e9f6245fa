//! Losses, matching, synthetic data, optimizer and the training loop.

pub mod data;
pub mod fit;
pub mod hungarian;
pub mod losses;
pub mod metrics;
pub mod optim;

pub use data::{synth_dataset, synth_shapes, synth_shapes_with, Example, SynthSample};
pub use fit::{evaluate, fit, EvalMetrics, FitOptions, FitReport, StepRecord, Task};
pub use hungarian::{brute_force, hungarian, Matching};
pub use losses::{mask_loss, panoptic_loss, panoptic_training_loss, semantic_loss, GtInstance};
pub use metrics::{Confusion, PqAccumulator};
pub use optim::{AdamW, AdamWConfig};
