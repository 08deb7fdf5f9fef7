//! Incremental few-shot 3D point cloud segmentation with a frozen backbone.
//!
//! Base scenes are mined for confident background pseudo-instances, which are pooled into
//! a frozen prototype bank. Each novel class is registered from a handful of support
//! scenes: its few-shot prototype retrieves related bank entries, and attention over them
//! produces the enriched prototype appended to the classifier.

pub mod contextualisation;
pub mod error;
pub mod evaluation;
pub mod ingestion;
pub mod manifest;
pub mod primitives;
pub mod provider;
pub mod registration;
pub mod rng;
pub mod runner;
pub mod types;

pub use error::{Result, ScopeError};
pub use types::*;
