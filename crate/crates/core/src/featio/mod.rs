//! Feature-map data model, on-disk formats and synthetic data.

mod fmap;
mod manifest;
mod synth;

pub use fmap::{read_fmap, write_fmap, FeatureMap, FmapError, GridShape, LocationRef, ScaleGrid, FLAG_NONNEGATIVE, MAGIC, VERSION};
pub use manifest::{Dataset, DatasetManifest, ManifestEntry, ManifestError, PartMask, MANIFEST_FORMAT};
pub use synth::{synth_dataset, SynthDataset, SynthError, SynthMode, SynthSpec};
