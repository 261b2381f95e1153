//! Byte/token language models with table-free binary-code inputs.
//!
//! The input interface replaces a trainable `V x d` embedding table with the
//! minimal `K = ceil(log2 V)`-bit binary code of the token id, optionally
//! recoded by an invertible affine map over GF(2), then tiled to model width.
//! The rest of the crate is a small deterministic transformer training
//! harness for running matched comparisons between that interface and a
//! standard learned input table.

pub mod checkpoint;
pub mod codes;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod runner;
pub mod gf2;
pub mod rng;
