//! Synthetic multi-domain segmentation data: seeded sphere phantoms with
//! per-domain intensity statistics and label sets, plus augmentation and
//! patch cropping.

mod augment;
mod generate;
mod spec;

pub use augment::{apply_augment, augment, crop_patch, extract, AugmentDraw, FOREGROUND_CROP_PROB};
pub use generate::{
    class_offsets, generate_domain, generate_sample, sphere_voxels, split_indices, DatasetManifest, Sample,
    SampleEntry, Split, Splits, MANIFEST_FILE,
};
pub use spec::{DomainSpec, LesionSpec};
