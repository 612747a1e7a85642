//! Divide-and-unite co-speech motion diffusion with conditional adapters.
//!
//! The crate covers the synthetic motion corpus, the cosine-schedule
//! diffusion process, the DU-Trans denoiser, parameter-efficient finetuning
//! (X-Adapter, serial adapter, LoRA, prefix), identity and emotion
//! conditioning, training with checkpoints, and the evaluation metrics.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod peft;
pub mod training;

pub use error::{Error, Result};
