//! Composable prompt tuning on a frozen vision transformer.
//!
//! Each data source trains its own prompt, memory tokens and head against a
//! shared frozen backbone. At inference any subset of sources is composed
//! with structured attention, so a source's output never depends on which
//! other sources are present, and removing a source means deleting its
//! prompt.

#![allow(clippy::needless_range_loop)]

pub mod aptw;
pub mod autodiff;
pub mod composition;
pub mod data;
pub mod error;
pub mod harness;
pub mod optim;
pub mod pool;
pub mod prompt;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use pool::{PromptPool, PromptStore};
pub use prompt::{PromptVariant, SourcePromptSet};
pub use tensor::{Scalar, Tensor};
pub use vit::{BackboneConfig, BackboneParams};
