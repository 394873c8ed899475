//! Attention and attention-schema agents for cooperative gridworld tasks.
//!
//! The crate is layered bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`layers`]: GRU cell, scaled dot-product attention over observation
//!   patches, and the activator/suppressor mask generator.
//! - [`agents`]: the nine architectures (H1–H4 and the five H5 variants).
//! - [`env`]: GhostRun and MazeCleaners gridworlds.
//! - [`training`]: rollouts, GAE and PPO.
//! - [`harness`]: experiment runs, metrics, checkpoints and comparison output.
//! - [`gradsuite`]: randomised finite-difference checks of every layer.

pub mod agents;
pub mod autodiff;
pub mod env;
mod error;
pub mod gradsuite;
pub mod harness;
pub mod image;
pub mod layers;
pub mod params;
pub mod training;

pub use error::{Error, Result};
