//! Dataset ingestion, run configuration and model persistence.
//!
//! Field files are raw little-endian `f32` vectors in sea-index order, one
//! file per `(role, year, month[, member])`; a TOML manifest next to them
//! declares the grid, mask, year range, months and ensemble size. Fitted
//! models go into a small versioned binary container (see [`container`]).

pub mod archive;
pub mod config;
pub mod container;

pub use archive::{load_archive, save_archive, FieldArchive, FieldSource, OBSERVATION_FLOOR};
pub use config::{load_config, save_config, CorrectionMode, RunConfig};
pub use container::{load_model, save_model, StoredModel};
