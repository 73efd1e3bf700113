//! Unsupervised cooperative 3D pseudo-labeling.
//!
//! A deterministic training loop that turns noisy proposals from weak
//! cluster-based detectors into pseudo labels for a multi-agent (fused) view
//! and a single-agent (ego) view, over a synthetic multi-agent LiDAR world.

pub mod ccl;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod ppf;
pub mod pps;
pub(crate) mod rng;
pub mod scenesim;
pub mod weakdet;

pub use error::{Error, Result};
