//! Attention-free 2D-to-3D human pose lifting.
//!
//! The engine pairs selective state space models (linear-time sequence
//! mixing) with graph convolutions over the kinematic skeleton, fused
//! per position by a learned gate. Everything runs on a small f64 tensor
//! library with reverse-mode autodiff; no GPU, no attention, no unsafe.

pub mod autodiff;
pub mod dataio;
pub mod graph;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod verify;
