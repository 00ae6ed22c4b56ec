//! Dataset files, the synthetic generator, batch sampling and augmentation.

pub mod augment;
pub mod manifest;
pub mod pnm;
pub mod sampler;
pub mod synth;

pub use augment::{augment, channel_mean, AugmentConfig};
pub use manifest::{Landmark, Manifest, Record, Split};
pub use pnm::Raster;
pub use sampler::{PkBatch, PkSampler};
pub use synth::{generate_synthetic, synthesize, SynthConfig};
