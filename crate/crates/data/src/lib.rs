//! Datasets for occluded person re-identification: a procedural generator,
//! a loader for the standard directory layout, augmentation and PK sampling.

pub mod augment;
pub mod error;
pub mod index;
pub mod loader;
pub mod sampler;
pub mod seeds;
pub mod synthetic;

pub use augment::{augment, hflip, AugmentConfig, Augmented};
pub use error::{Error, Result};
pub use index::{DatasetIndex, OcclusionTag, SampleRecord, Split};
pub use loader::{load_image, load_images, load_reid_directory, parse_file_name};
pub use sampler::PkSampler;
pub use synthetic::{generate_synthetic, GeneratedDataset, SampleMeta, SyntheticConfig};
