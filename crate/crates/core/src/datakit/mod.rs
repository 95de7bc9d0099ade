//! Data generation, IDX ingestion, checkpoint persistence and run configuration.

pub mod checkpoint;
pub mod config;
pub mod idx;
pub mod mixture;

pub use checkpoint::{Checkpoint, ComponentTag, SelectorSnapshot, CHECKPOINT_VERSION};
pub use config::{
    parse_config, parse_config_file, preset_values, Bandwidth, CondStrategy, KeyDoc, Provenance,
    RunConfig, Selection, KEYS,
};
pub use idx::{load_idx, parse_idx, save_idx, write_idx, IdxImages};
pub use mixture::{Component, MixtureSpec, Origin, SampleSet, SampleSource};
