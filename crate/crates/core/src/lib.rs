//! Desk-scale model merging: task vectors, SVD-based merging and
//! test-time adaptation of binary masks over singular components.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod linalg;
pub mod merge;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod spectral;
pub mod tasks;
