//! Learning set functions from optimal-subset supervision.
//!
//! A permutation-invariant network scores subsets; training fits it so that
//! the mean-field approximation of the induced Boltzmann distribution puts
//! its mass on the observed optimal subsets. The mean-field state is the
//! fixed point `ψ = σ(scale(∇F̃(ψ)))` of the multilinear extension `F̃`, and
//! gradients flow through it either by implicit differentiation
//! ([`implicit::implicit_vjp`]) or by unrolling ([`implicit::unrolled_vjp`]).
//!
//! Start with [`train::train`] and [`eval::mean_jc`]; the `imf` binary wraps
//! them with file formats and an oracle suite.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod fixedpoint;
pub mod implicit;
pub mod multilinear;
pub mod setfn;
pub mod train;

pub use error::{Error, Result};
