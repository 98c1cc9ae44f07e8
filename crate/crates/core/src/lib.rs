//! Hierarchical query-conditioned graph attention for video question
//! answering.
//!
//! The crate is `no_std` (with `alloc`): every computation here is a pure
//! function of its inputs and a seed. File formats, the CLI and rendering
//! live in the `hqga` companion crate.
//!
//! Layout, bottom-up:
//!
//! * [`tensor`], [`nn`]: dense matrices and the differentiable layers
//!   (linear, ELU/ReLU, temporal convolution, GRU).
//! * [`datamodel`]: configs, raw and projected feature bundles, QA samples.
//! * [`qga`]: the query-conditioned graph attention unit.
//! * [`hierarchy`]: objects → frames → clips stacking of shared units.
//! * [`decoder`]: multi-choice / open-ended answer heads and losses.
//! * [`model`]: full per-sample forward and backward pass.
//! * [`training`], [`optim`]: two-stage Adam training, evaluation and the
//!   ablation harness.
//! * [`synth`]: seeded compositional benchmark generator.
//! * [`trace`]: attention evidence records and top-down localisation.
//! * [`oracle`]: loop-level reference transcriptions and the
//!   finite-difference gradient checker; [`extended`] is the double-double
//!   scalar its probes run in.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
// Index loops mirror the formulas; negated comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod config;
pub mod datamodel;
pub mod decoder;
pub mod error;
pub mod extended;
pub mod hierarchy;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod qga;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod training;

pub use config::{AblationVariant, DecoderMode, HierarchyConfig, InputDims};
pub use error::{Error, Result};
pub use tensor::{Matrix, Real};
