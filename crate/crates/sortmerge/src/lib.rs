//! An out-of-core sort-merge service on flowgate pipelines.
//!
//! Inputs are chunk objects in a [`store::Store`]; a request names the
//! chunks of one dataset and yields the keys of its sorted output chunks.

pub mod app;
pub mod chunk;
pub mod cli;
pub mod dataset;
pub mod stages;
pub mod store;
pub mod verify;

pub use app::{AppConfig, AppError, SortMerge, Variant};
pub use chunk::{Chunk, Record};
pub use dataset::{DatasetManifest, GenSpec};
pub use store::Store;
