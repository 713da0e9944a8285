//! Product-space proximity, trade relatedness measures and extended gravity
//! regressions over bilateral trade flows.
//!
//! The pipeline runs `ingest` → `complexity` (RCA, advantage matrix,
//! proximity) → `relatedness` (ω, Ω^(d), Ω^(o)) → `gravity` (dataset
//! assembly, standardization, streaming least squares, splits, trend test).
//! `oracle` holds seeded synthetic worlds and naive reference
//! implementations; `cli` drives the stages from files.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod complexity;
pub mod error;
pub mod gravity;
pub mod ingest;
pub mod numeric;
pub mod oracle;
pub mod relatedness;

pub use error::{Error, Result};
