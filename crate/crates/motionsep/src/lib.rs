//! Training-free motion separation for dynamic image sequences.
//!
//! A video is modeled as the output of an untrained convolutional
//! generator applied to a disentangled latent space: one static code
//! shared by all frames plus one scalar track per motion type, where
//! at least one track is given a priori (e.g. a respiratory trigger
//! from an accelerometer). Fitting the generator weights and the
//! unknown latent variables to a single video, and then freezing a
//! selected track at a reference frame, yields sequences containing
//! only the remaining motion.
//!
//! Crate layout:
//! - [`tensor`]: dense nd-array storage plus a reverse-mode autodiff
//!   graph covering exactly the ops the generator and loss need.
//! - [`generator`]: architecture specs, weight initialization, latent
//!   state and forward evaluation.
//! - [`optim`]: Adam with learning-rate blocks and best-iterate
//!   tracking.
//! - [`phantom`]: synthetic nested-disk phantom, motion triggers and
//!   the semi-synthetic shear/concat/crop pipeline for real data.
//! - [`separation`]: freeze-and-generate, error metrics, reference
//!   frame sweeps and multi-seed robustness studies.
//! - [`io`]: DVT video container, PGM export, CSV/JSON artifacts.

pub mod generator;
pub mod io;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod separation;
pub mod tensor;
pub mod video;
