//! Embedding bundles, dataset manifests, synthetic generation and batching.

pub mod batch;
pub mod bundle;
pub mod manifest;
pub mod synth;

pub use batch::batch_indices;
pub use bundle::{EmbeddingBundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use manifest::{Dataset, DatasetManifest, ManifestEntry, Sample, Split, CLASS_NAMES};
pub use synth::{generate_synthetic, ClassDirections, SynthConfig};
