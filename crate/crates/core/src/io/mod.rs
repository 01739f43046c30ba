//! Dataset files, configuration text, and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod extxyz;

pub use checkpoint::{
    build_checkpoint, load_checkpoint, restore_model, save_checkpoint, ArrayData, Checkpoint,
    CheckpointError, NamedArray, Restored, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{
    canonical_config_text, parse_config_text, read_config_file, ConfigError, FullConfig,
};
pub use extxyz::{format_extxyz, parse_extxyz, parse_extxyz_str, write_extxyz, Dataset, ExtxyzError};
