// SPDX-License-Identifier: Apache-2.0

pub mod datagen;
pub mod error;
pub mod format;
pub mod graph;
pub mod level;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod sta;
pub mod train;

pub use error::{Error, Result};
pub use graph::{CircuitGraph, EdgeKind, EdgeRecord, Lut, LutId, NodeRecord};
