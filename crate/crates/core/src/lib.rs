//! Desk-scale V2I localization lab.
//!
//! Synthesizes multipath OFDM channels and pseudo-camera frames for random
//! urban scenes, then localizes the user either with a classical
//! MUSIC + time-of-arrival chain or with a CSI/vision contrastive-fusion
//! network trained by a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod camera;
pub mod channel;
pub mod classic;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod rng;
pub mod scene;

pub use error::{Error, ErrorCategory, Result};
