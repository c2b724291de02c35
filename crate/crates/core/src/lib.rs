//! Multi-view geometric consistency for text-conditioned segmentation.
//!
//! The crate covers the whole desk-scale pipeline: pinhole geometry and
//! differentiable cross-view warping, a small reverse-mode autodiff engine,
//! LoRA adapters on a frozen toy segmenter, the BCE + Dice + stop-gradient
//! consistency objective, AdamW training, RGBA prompt export with a
//! depth-lifting reconstruction proxy, point-cloud metrics, an analytic RGB-D
//! scene generator and RGB-D ingestion.

pub mod autodiff;
pub mod benchmark;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod ingest;
pub mod lora;
pub mod metrics;
pub mod losses;
pub mod prompt_lifting;
pub mod segmenter;
pub mod synthscene;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
