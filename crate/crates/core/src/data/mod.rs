//! Images, paired samples, augmentation and datasets.

mod dataset;
mod image;
mod synth;

pub use dataset::{dataset_build, synth_dataset, Dataset, ManifestEntry, Split, MANIFEST};
pub use image::{level_to_signed, signed_to_level, BinaryMask, ImageTensor};
pub use synth::{augment, synth_pair, AugmentationSpec, BlemishSpec, PairedSample};
