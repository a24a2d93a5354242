//! Dataset ingestion: the CSV manifest, decoding of image/segmentation pairs
//! into cell records, and a synthetic generator.

pub mod cell;
pub mod manifest;
pub mod synth;

pub use cell::{
    decode_all, decode_cell, decode_images, nucleus_centroid, CellRecord, ColorRule, LabelColorMap, Mask, Region,
};
pub use manifest::{
    dataset_stats, load_manifest, load_manifest_with, Category, DatasetManifest, DatasetStats, ManifestEntry,
    ManifestOptions, Task, CLASS_NAMES, N_CLASSES,
};
pub use synth::{generate_synthetic, SynthSpec, SynthTruth};
