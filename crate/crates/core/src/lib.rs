//! Online multi-object tracking by detection with an appearance classifier
//! that is retrained in closed form after every frame.
//!
//! The pipeline per frame is: Kalman prediction, learned affinity against
//! stored tracks, a cosine/IoU fallback, lifecycle bookkeeping and a
//! recursive ridge-regression update of the classifier.

pub mod association;
pub mod bench;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fac;
pub mod io;
pub mod motion;
pub mod selftest;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
