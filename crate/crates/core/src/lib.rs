//! Recovery of rigid-body trajectories from motion-blurred frames and event
//! streams using an explicit Gaussian-kernel object model.

pub mod error;
pub mod events;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod kalman;
pub mod losses;
pub mod metrics;
pub mod msa;
pub mod recovery;
pub mod scene;
pub mod trajectory;

pub use error::{Error, Result};
