//! Kernel-partitioned dynamic convolution with warehouses of kernel cells
//! shared across layers.

pub mod accounting;
pub mod assemble;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod exec;
pub mod manifest;
pub mod model;
pub mod ops;
pub mod partition;
pub mod preset;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod warehouse;

#[cfg(test)]
mod testutil;

pub use exec::Exec;
pub use manifest::ModelManifest;
pub use model::{build_model, ModelGraph};
pub use scalar::Scalar;
