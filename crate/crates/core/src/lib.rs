//! Graph-free molecular transformer toolkit.
//!
//! Molecules are turned into dual discrete/continuous token sequences
//! ([`tokenizer`]) using quantile codebooks ([`codebook`]), fed to a plain
//! transformer ([`model`]) built on a small reverse-mode autodiff engine
//! ([`nn`]), trained in two stages ([`train`]), and probed with attention,
//! equivariance, uncertainty and scaling-law analyses ([`analysis`]) and
//! molecular dynamics ([`md`]).

pub mod codebook;
pub mod data;
pub mod elements;
pub mod tokenizer;
pub mod analysis;
pub mod md;
pub mod model;
pub mod nn;
pub mod train;
