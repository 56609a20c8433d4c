//! Test-time adaptation lab.
//!
//! A self-contained, deterministic sandbox for adapting a small two-stage
//! object detector to a corrupted scene stream while it runs. The pieces:
//!
//! * [`stats`]: pooled feature vectors and streaming Gaussian statistics.
//! * [`align`]: symmetric KL between Gaussians, with analytic gradients
//!   back to the per-sample features that moved the streaming estimate.
//! * [`detector`]: the toy detector itself, with hand-written forward and
//!   backward passes, an SGD-with-momentum optimizer and EMA weights.
//! * [`augment`]: weak/strong view augmentation and teacher pseudo-labels.
//! * [`bench`]: synthetic scene generation, corruption operators and a
//!   mean-average-precision evaluator.
//! * [`engine`]: the online adaptation loop over a scene stream.
//! * [`pretrain`]: supervised source training used to produce the initial
//!   checkpoint and source statistics.
//! * [`config`] / [`cli`]: the experiment configuration tree and the
//!   `tta` command-line tool built on it.
//!
//! Everything is driven by a single seed through named sub-streams, so a
//! rerun with the same configuration reproduces every artifact byte for
//! byte.

pub mod align;
pub mod augment;
pub mod bench;
pub mod cli;
pub mod config;
pub mod detector;
pub mod engine;
pub mod geom;
pub mod pretrain;
pub mod seeds;
pub mod stats;
