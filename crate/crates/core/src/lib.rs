//! Cross-supervised radiograph representation learning at desk scale.
//!
//! The crate pre-trains a multi-view radiograph transformer against free-text
//! reports through two tasks — report generation and study-report contrastive
//! alignment — then fine-tunes and evaluates it on synthetic target corpora.
//!
//! Module map:
//! - [`tensor`]: dense tensors with reverse-mode autodiff
//! - [`nn`]: linear / embedding / attention building blocks
//! - [`vision`]: the radiograph transformer encoder and CAM readout
//! - [`text`]: tokenizer, report encoder, report decoder
//! - [`fusion`]: view assembly + attention fusion, contrastive and total loss
//! - [`data`]: synthetic corpus generation, screening, augmentation
//! - [`train`]: SGD, schedules, checkpoints, pre-train / fine-tune drivers
//! - [`eval`]: AUC, t-test, CAM boxes, IoU, report emission
//! - [`config`]: flat dotted-key experiment configuration

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{GradTape, Gradients, Scalar, Tensor};
