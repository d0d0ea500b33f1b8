//! Language-neutral tensor container and synthetic test tensors.
//!
//! A container is a JSON manifest listing named entries plus one raw binary
//! file per entry (little-endian, row-major; `bit` entries are packed eight
//! per byte with each row padded to a byte boundary). Quantized artifacts
//! ride along as a structured `artifact` object inside the manifest: bulk
//! element-wise data goes to binary entries, per-channel scalar parameters
//! stay in the JSON, which round-trips f64 exactly.

pub mod artifact;
pub mod manifest;
pub mod synth;

pub use artifact::{load_artifact, save_artifact, Artifact};
pub use manifest::{
    load_tensor, read_manifest, Dtype, ManifestEntry, ManifestWriter, TensorData, TensorManifest,
};
pub use synth::{gen_activations, gen_gaussian_longtail, SyntheticActivationSpec, SyntheticSpec};
