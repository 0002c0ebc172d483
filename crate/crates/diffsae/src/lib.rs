// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, the training driver, the edit server and shard-level
//! pipelines around [`diffsae_core`].

pub mod batches;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;
pub mod plan;
pub mod planted;
pub mod protocol;
pub mod shard;
pub mod trainer;

pub use diffsae_core as core;
pub use error::{Error, Result};
