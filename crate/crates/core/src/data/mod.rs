//! Feature files, dataset manifests and the synthetic action-unit generator.

pub mod features;
pub mod manifest;
pub mod synthetic;

pub use features::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use manifest::{
    load_manifest, parse_manifest, save_manifest, Dataset, DatasetManifest, GroundTruthSpan, Stream, StreamPaths,
    Subset, VideoRecord, MANIFEST_VERSION,
};
pub use synthetic::{generate_synthetic, SyntheticSpec, MANIFEST_FILE};
