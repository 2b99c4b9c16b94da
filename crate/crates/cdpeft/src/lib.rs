//! Parameter-efficient fine-tuning for bitemporal change detection.
//!
//! A frozen plain vision-transformer encoder runs both frames of an image
//! pair; pluggable tuning layers (bottleneck adapter, LoRA, IA3, prefix
//! tokens) adapt it; a masked-cross-attention block fuses the per-frame
//! features into one change feature per patch; a small convolutional decoder
//! upsamples to full-resolution change logits. Everything runs on a
//! self-contained 64-bit reverse-mode autodiff core, so gradients are
//! verifiable against finite differences end to end.
//!
//! Data-parallel loops (batches, evaluation, dataset generation, gradient
//! checks) run on rayon under the default `parallel` feature and fall back
//! to plain iteration without it. Reductions happen in a fixed order either
//! way, so results are byte-identical across thread counts.

pub mod checks;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod model;
pub mod netpbm;
pub mod par;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod weights;

pub use error::{Error, Result};
pub use model::{build_model, GradMode, Model, Parameter};
pub use peft::{partition_report, PeftConfig, PeftMethod};
pub use tensor::{grad_check, Graph, NodeId};
pub use train::{compute_metrics, evaluate, focal_jaccard_loss, AdamW, MetricReport, TrainConfig};
pub use vit::ViTConfig;
