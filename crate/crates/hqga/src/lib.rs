//! File formats, rendering and the command-line driver around
//! [`hqga_core`].
//!
//! * [`arrays`]: named float arrays in a safetensors container.
//! * [`archive`]: per-video feature archives and token embeddings.
//! * [`checkpoint`]: parameters plus a configuration snapshot.
//! * [`dataset_io`]: the dataset directory layout.
//! * [`metrics`]: epoch CSV and ablation JSON.
//! * [`trace_io`], [`render`]: trace JSONL and PNG images.
//! * [`run_config`], [`cli`], [`commands`]: configuration and subcommands.

pub mod archive;
pub mod arrays;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod dataset_io;
pub mod error;
pub mod metrics;
pub mod render;
pub mod run_config;
pub mod trace_io;

pub use error::{IoError, Result};
