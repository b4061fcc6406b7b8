//! Cross-modality attention diffusion policy sandbox.
//!
//! A desk-scale imitation-learning pipeline: a synthetic 2D assembly world
//! with six scripted primitives emits multimodal demonstrations (two cameras,
//! proprioception, tactile); per-modality encoders project observations into a
//! shared 128-d token space; a cross-modality attention (CMA) transformer
//! fuses the tokens into a conditioning vector while exposing its last-layer
//! attention weights; a conditional 1D U-Net diffusion model generates action
//! chunks; and the analysis stack clusters CMA embeddings to recover the
//! primitive segmentation without labels.

pub mod analysis;
pub mod cli;
pub mod cma;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod params;
pub mod policy;
pub mod rawio;
pub mod report;
pub mod rng;
pub mod svg;
pub mod synthworld;
pub mod trainer;
pub mod tsne;

pub use error::{Error, Result};
