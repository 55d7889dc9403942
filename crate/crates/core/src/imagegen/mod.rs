//! Word rendering, security patterns, envelope compositing and datasets.

mod compose;
mod dataset;
pub mod font;
mod image;
mod pattern;

pub use compose::{compose_sample, ComposeParams};
pub(crate) use dataset::{create_dir, write_file, write_manifest};
pub use dataset::{
    generate_dataset, load_dataset, read_manifest, sample_plan, Canvas, DatasetConfig,
    LabeledImage, LoadedDataset, Manifest, ManifestHeader, SamplePlan, SampleRecord, Split,
    CONFIG_FILE, MANIFEST_FILE, SCHEMA_VERSION,
};
pub use image::GrayImage;
pub use pattern::{standard_patterns, synth_pattern, PatternKind, PatternSpec};

pub use font::render_text;
