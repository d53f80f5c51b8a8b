//! On-disk datasets and the synthetic generator.

pub mod io;
pub mod synth;

pub use io::{convert, load_dataset, save_dataset, Dataset, DatasetManifest, RawDump};
pub use synth::{generate_synthetic, RelationConfig, SyntheticConfig};
