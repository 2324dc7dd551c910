//! Adversarial curriculum for a diffusion-forcing world model.
//!
//! A KL-anchored adversarial policy searches a synthetic first-person
//! environment for trajectories the world model predicts badly; a prioritized
//! trajectory buffer turns those failures into a fine-tuning curriculum.

pub mod checkpoint;
pub mod coordinator;
pub mod env;
pub mod error;
pub mod evalsuite;
pub mod fingerprint;
pub mod latent;
pub mod numerics;
pub mod pat_buffer;
pub mod policy;
pub mod rng;
pub mod scoring;
pub mod trajectory;
pub mod wm;

pub use error::{Error, Result};
