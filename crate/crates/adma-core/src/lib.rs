//! Desk-scale laboratory for continual test-time adaptation of a tiny
//! vision transformer.
//!
//! The crate is organized bottom-up:
//!
//! * [`rng`] — counter-based deterministic random streams
//! * [`tensor`] — f64 tensors, a tape-based reverse-mode graph, Adam, and
//!   checkpoint I/O
//! * [`vit`] — the transformer: patch embedding, blocks, token masking, and
//!   the reconstruction decoder
//! * [`hog`] — histogram-of-oriented-gradients targets (plus raw-pixel and
//!   edge-magnitude alternatives)
//! * [`dam`] — distribution-aware mask selection from MC-dropout
//!   disagreement
//! * [`objective`] — consistency, reconstruction, and entropy losses
//! * [`domains`] — synthetic shape images, corruption families, and the
//!   one-pass domain stream
//! * [`harness`] — pretraining, the online adaptation loop, ablation /
//!   sweep drivers, and divergence diagnostics

pub mod dam;
pub mod domains;
pub mod error;
pub mod harness;
pub mod hog;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};
