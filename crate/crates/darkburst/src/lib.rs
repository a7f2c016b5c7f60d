//! Burst enhancement of extremely dark raw photographs.
//!
//! A short-exposure raw frame amplified a few hundred times is mostly
//! noise. This crate restores such frames with a coarse-to-fine pair
//! of convolutional networks, and fuses whole bursts of them through a
//! permutation-invariant set encoder: frames pass through a shared
//! encoder, exchange information via elementwise maxima, and decode to
//! one RGB image. Any frame order produces the bit-identical output,
//! one frame degenerates exactly to the single-frame network, and
//! frames that disagree with the reference can be masked out by block
//! motion estimation before fusion.
//!
//! Everything runs on a self-contained f64 tensor engine with reverse
//! mode differentiation ([`tensor`]), so training needs no external
//! runtime. Networks train in three stages (coarse, fine, set) on
//! synthetic dark bursts from a sensor simulator ([`sim`]) with an L1
//! plus contextual objective ([`loss`]), and are scored by PSNR and
//! SSIM ([`metrics`]).
//!
//! Module map, roughly bottom up:
//!
//! - [`tensor`]: shapes, ops, tape, gradient checking
//! - [`raw`], [`formats`]: Bayer frames, packing, file containers
//! - [`sim`], [`dataset`]: scene synthesis, darkening, dataset layout
//! - [`nets`], [`features`]: the three networks and the frozen random
//!   feature pyramid behind the feature losses
//! - [`loss`], [`metrics`], [`motion`]: objectives, quality scores,
//!   block-matching masks
//! - [`pipeline`], [`optim`], [`checkpoint`]: forward composition,
//!   Adam, serialised training state
//! - [`harness`], [`config`]: training loop, evaluation, enhancement,
//!   self tests, run configuration
//!
//! The `darkburst` binary exposes the same drivers as subcommands
//! (`gen-dataset`, `train`, `enhance`, `evaluate`, `selftest`); the
//! examples directory walks each layer with printed intermediates.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
mod resample;
pub mod features;
pub mod formats;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod motion;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod raw;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
