//! Reuse text-pretrained decoder-only transformer weights as the backbone
//! of image, audio-waveform, and acoustic-token classifiers.
//!
//! Pipeline: modality front-end → frozen-or-LoRA-tuned causal transformer
//! → last-token MLP head. The crate covers the full desk-scale loop:
//! weight import, training in frozen/lora/scratch modes, gradient
//! checking, evaluation, parameter ledgers, and scaling sweeps.

pub mod archive;
pub mod datasets;
pub mod error;
pub mod frontends;
pub mod heads;
pub mod lora;
pub mod matrix;
pub mod model;
pub mod num;
pub mod tasks;
pub mod trainer;
pub mod transformer;

pub use error::{GraftError, Result};
