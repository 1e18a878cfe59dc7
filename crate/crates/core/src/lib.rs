//! Trajectory-as-modality decision transformer laboratory.
//!
//! A small reverse-mode autodiff core drives a causal transformer whose
//! input stream splices learned (return-to-go, state, action) embeddings into
//! a text prompt between `<|traj_begin|>` and `<|traj_end|>`. Around it sit a
//! continuous U-maze simulator, an offline-dataset curation pipeline,
//! return-conditioned training and rollout, and representation analyses.

pub mod analysis;
pub mod backbone;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod par;
pub mod rollout;
pub mod tensor;
pub mod train;
pub mod trajmod;

pub use error::{Error, Result};
