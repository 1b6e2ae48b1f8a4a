//! Desk-scale generation of human-object-scene interactions.
//!
//! The pipeline: procedural carry-trajectory synthesis and scene voxelization
//! (`dataforge`), a transformer denoiser over windowed motion features (`net`),
//! a diffusion teacher (`diffusion`) distilled into a few-step consistency
//! model (`consistency`), and an autoregressive generation engine with dynamic
//! voxel perception and bump-aware collision guidance (`engine`). Evaluation
//! lives in `metrics`, command-line orchestration in `cli`.

pub mod cli;
pub mod consistency;
pub mod dataforge;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod tape;
pub mod util;
pub mod voxel;

pub use error::{Error, Result};
