//! Near-field mmWave beam prediction from far-field sub-6 GHz pilots.

pub mod airlink;
pub mod bench;
pub mod datasmith;
pub mod error;
pub mod gradcore;
pub mod nmbenet;
pub mod polarbook;
pub mod wavefield;

pub use error::{Error, Result};
