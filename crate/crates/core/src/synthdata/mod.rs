//! Synthetic paired data. A latent sequence drives three fixed pseudo-encoder
//! views, a pseudo-text embedding and a caption, so alignment and captioning
//! can be learned and checked without real audio.

mod augment;
mod format;
mod generate;
mod loader;

pub use augment::SpecAugment;
pub use format::{read_record, Dataset, Manifest, FORMAT_VERSION, MAGIC};
pub use generate::{caption_from_latent, generate_dataset, generate_sample, LatentSpec, Projections, SamplePair, ViewTriple};
pub use loader::{epoch_plan, Batch, BatchStream};
