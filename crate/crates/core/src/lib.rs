//! Continual multimodal tuning with dynamically allocated LoRA experts.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece:
//! a small reverse-mode autodiff engine, a two-tower toy multimodal model with
//! per-task LoRA attachment points, gradient-norm layer sensitivity and budget
//! allocation, autoencoder task routers, the continual training loop with its
//! baselines, and the AVG/Last/BWT metrics. File formats, configuration and the
//! command line live in the companion `dmole` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod proxy;
pub mod router;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
