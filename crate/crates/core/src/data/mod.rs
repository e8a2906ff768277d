//! Datasets: in-memory container, synthetic generator, z-score
//! normalization and CSV/JSON ingestion.

mod dataset;
pub mod io;
pub mod normalize;
pub mod synthetic;

pub use dataset::{MultiViewDataset, Split, Targets, Task};
pub use io::{load_dataset, write_dataset, DatasetManifest};
pub use normalize::{NormStats, ViewStats};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticView};
