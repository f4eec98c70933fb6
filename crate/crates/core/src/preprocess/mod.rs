//! Denoising, hand-engineered pixel features and augmentation.

pub mod augment;
pub mod bfe;
pub mod filters;
pub mod nlmeans;

pub use augment::{augment, AugmentConfig, CropConfig, CropMode, FlipConfig, JitterConfig};
pub use bfe::{bfe, BfeConfig, BFE_CHANNELS, BFE_TAG};
pub use nlmeans::{estimate_noise_sigma, nl_means, nl_means_with, NlMeansConfig};
