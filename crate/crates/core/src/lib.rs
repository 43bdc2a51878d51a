//! HOT: dynamic link prediction on continuous-time dynamic graphs.
//!
//! The pipeline runs, for a query `(u, v, t)`:
//!
//! 1. [`sampler`]: budgeted 1-hop and k-hop temporal neighbourhoods of `u`
//!    and `v` built from events strictly before `t`, plus co-occurrence counts.
//! 2. [`features`]: node/edge/time/co-occurrence encodings, patched,
//!    aligned, and joined side by side into one input matrix.
//! 3. [`brt`]: a block-recurrent transformer (one horizontal and one
//!    vertical cell) with recurrent state vectors and a key/value cache.
//! 4. [`model`]: mean pooling, an MLP decoder, and the training loop.
//!
//! [`eval`] holds negative-edge samplers, AP/AUC and the evaluation
//! protocols; [`config`] the hyper-parameters and run files; [`memory`] the
//! attention memory estimate; [`tensor`] is the small autodiff engine
//! everything runs on.

pub mod brt;
pub mod config;
pub mod ctdg;
pub mod error;
pub mod eval;
pub mod features;
pub mod memory;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
