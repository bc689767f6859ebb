//! Spectrogram classification with joint cross-entropy and triplet training.
//!
//! Pipeline: [`audio`] turns WAV files into log-mel grids, [`model`] maps
//! them to embeddings and logits on top of the [`tensor`] autodiff tape,
//! [`loss`] defines the objectives, [`train`] optimizes and [`eval`] scores.

pub mod audio;
pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;
