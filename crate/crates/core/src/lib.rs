//! Cervical cell classification from appearance and morphology.
//!
//! Cells arrive as an RGB image plus nucleus and cytoplasm segmentations.
//! They are turned into five-channel samples (R, G, B, nucleus mask,
//! cytoplasm mask), balanced by rotation and translation augmentation, split
//! by patient for cross-validation, and fed to small CNNs trained with SGD.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod rng;
pub mod split;
pub mod train;

pub use error::{Error, ErrorKind, Result};
