//! Identity-preserving face super-resolution for low-resolution face
//! verification.
//!
//! A feature extractor is trained to classify identities; a generator is then
//! trained against the frozen extractor so super-resolved faces land close to
//! their high-resolution originals in descriptor space. Verification
//! thresholds the descriptor distance between a super-resolved probe and a
//! high-resolution gallery image.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod network;
pub mod parallel;
pub mod pgm;
pub mod training;

pub use error::{Error, Result};
pub use image::GrayImage;
