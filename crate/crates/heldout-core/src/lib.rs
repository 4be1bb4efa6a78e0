//! Core engine for a semantic anomaly detection benchmark built on the
//! hold-out-class protocol: train a classifier on K−1 classes, treat the
//! held-out class as anomalous at test time, and evaluate detection with
//! exact precision-recall / average-precision estimators.
//!
//! The crate is self-contained and `no_std`-compatible (it needs `alloc`):
//! dense tensors with reverse-mode autodiff, a small CNN with optional
//! self-supervised auxiliary heads (rotation prediction, patch-contrastive
//! coding), MSP/ODIN anomaly scorers plus trivial pixel baselines, and the
//! metrics layer. File formats, configuration, and the experiment runner
//! live in the companion `heldout-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod score;
pub mod tensor;

pub use error::{Error, Result};
