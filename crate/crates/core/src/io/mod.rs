//! On-disk formats: embedding tables, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod mce1;

pub use checkpoint::{checkpoint_hash, Checkpoint, Manifest};
pub use config::{ConceptSettings, RunConfig, VocabSettings};
pub use mce1::EmbeddingFile;
