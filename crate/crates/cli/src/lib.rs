//! Command-line pipeline around the `commdecode` library: configuration,
//! stage execution, provenance manifests and heatmap rendering.

pub mod config;
pub mod error;
pub mod heatmap;
pub mod manifest;
pub mod pipeline;
