//! Topology-regularized conditional denoising diffusion for 2-D mask
//! segmentation, small enough to train and verify on one CPU.
//!
//! Layout:
//! - [`schedule`]: DDPM variance schedules and closed-form forward/reverse steps
//! - [`tensor`]: dense tensors with reverse-mode autodiff and AdamW
//! - [`topology`]: exact cubical persistence of 2-D scalar fields
//! - [`transport`]: exact 1-Wasserstein matching between persistence diagrams
//! - [`nets`]: patch encoder, conditioning bridge, dual-head UNet denoiser
//! - [`losses`]: hybrid segmentation loss and the topological consistency term
//! - [`data`]: synthetic topology-controlled datasets and PGM/PNG ingestion
//! - [`metrics`]: Dice, IoU, HD95
//! - [`harness`]: training loop, inference modes, ablation runner
//! - [`config`]: plain-text dotted-key run configuration

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod topology;
pub mod transport;

pub use error::{Error, Result};
