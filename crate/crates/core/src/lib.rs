//! Unsupervised image segmentation: a convolutional patch encoder trained
//! with contrastive and reconstruction losses, diffusion condensation over the
//! learned embeddings, and segmentation metrics.

pub mod condense;
pub mod encoder;
pub mod imgio;
pub mod mining;
pub mod objective;
pub mod real;
pub mod metrics;
pub mod segment;
pub mod pipeline;
pub mod synth;
pub mod cli;
pub mod config;
