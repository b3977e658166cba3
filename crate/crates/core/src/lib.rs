//! Few-shot object detection lab.
//!
//! A small two-stage detector trained with a hand-written reverse-mode
//! autodiff engine, a cosine-similarity classification head, colour-jitter
//! pseudo-support sets, procedural traffic-sign scenes, and a COCO-style
//! evaluator. The [`pipeline`] module strings these together into base
//! training, few-shot fine-tuning, evaluation, and ablation grids.

pub mod error;
pub mod eval;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub mod detector;
pub mod head;
pub mod augment;
pub mod datasets;
pub mod image;
pub mod pipeline;
