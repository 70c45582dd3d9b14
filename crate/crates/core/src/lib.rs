//! Frame-to-frame pseudo-similarity warp estimation for down-facing
//! cameras and the visual-inertial dead-reckoning built on top of it.

pub mod bench;
pub mod corpus;
pub mod error;
pub mod estimator;
pub mod fusion;
pub mod imaging;
pub mod loss;
pub mod nn;
pub mod sim;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
