//! Procedural scenes in which several semantically distinct regions share a
//! single parameterized style, with ground-truth style labels.

mod caption;
mod io;
mod mask;
mod patches;
mod render;
mod style;

pub use caption::*;
pub use io::{dataset_read, dataset_write, decode_dataset, encode_dataset, DatasetConfig, Sample, DATASET_MAGIC};
pub use mask::{make_mask, make_mask_dims, MaskSpec, MAX_FRACTION, MIN_FRACTION};
pub use patches::{crop_patches, crop_patches_avoiding, place_patches, PatchSet, MAX_ATTEMPTS};
pub use render::{pattern_value, region_colors, render_scene, render_scene_sized, Region, SceneImage, Shape, DEFAULT_SIZE};
pub use style::{distinct_enough, palette_distance, sample_style, sample_styles, PatternFamily, StyleParams, MIN_PALETTE_DISTANCE};
