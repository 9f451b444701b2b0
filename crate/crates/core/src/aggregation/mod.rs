//! Transaction logs to compressed snapshot tensors and model-ready samples.

pub mod dataset;
pub mod distribution;
pub mod maps;
pub mod snapshot;
pub mod store;

pub use dataset::{
    build_dataset, valid_references, Dataset, DatasetOptions, InputStep, Observation,
    SnapshotSample, Split, SplitBounds, TargetStep,
};
pub use distribution::{
    compute_dd_long, compute_dd_short, day_of_week, estimate_uod, LongTermTable,
};
pub use maps::{build_compression_maps, load_maps, save_maps, CompressionMaps, REMAINDER};
pub use snapshot::{build_snapshot, IntervalSnapshot, LogIndex};
pub use store::{load_dataset, save_dataset, StoreManifest, STORE_SCHEMA_VERSION};
