//! Five-channel sample construction and class-balancing augmentation.
//!
//! A sample is an `m x m` window centered (up to a random shift) on the
//! nucleus centroid of a rotated cell, upsampled to `out_size` by nearest
//! neighbour. Samples are generated lazily from `(cell, rotation,
//! translation)` keys; the same key and seed always give the same tensor.

mod geometry;
mod plan;
mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use geometry::{assemble_sample, extract_patch, jitter_center, jitter_offset, rotate_cell, rotate_point, Patch};
pub use plan::{near_square, plan_augmentation, AugmentPlan, ClassPlan};
pub use sample::{
    build_training_set, channel_means, crop_view, identity_sample, make_sample, materialize, normalize, sample_at,
    select_channels, train_view, MaterializedIndex, Provenance, Sample, SampleKey, TrainingSet,
};

/// Channels of a full sample: R, G, B, nucleus, cytoplasm.
pub const N_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Patch side `m` in source pixels.
    #[serde(alias = "m")]
    pub patch_size: usize,
    /// Maximum translation `d` in pixels.
    #[serde(alias = "d")]
    pub max_translation: usize,
    pub target_per_class: usize,
    pub out_size: usize,
    pub seed: u64,
    /// Interpolation for the RGB planes; masks always use nearest.
    pub rotation_interp: Interp,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            patch_size: 128,
            max_translation: 10,
            target_per_class: 12000,
            out_size: 256,
            seed: 0,
            rotation_interp: Interp::Bilinear,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("augment.patch_size must be positive".into()));
        }
        if self.out_size < self.patch_size {
            return Err(Error::Config(format!(
                "augment.out_size ({}) must be at least patch_size ({})",
                self.out_size, self.patch_size
            )));
        }
        if self.target_per_class == 0 {
            return Err(Error::Config("augment.target_per_class must be positive".into()));
        }
        Ok(())
    }
}
