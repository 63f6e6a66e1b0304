//! Statistical matching of data files that share some columns and each
//! miss a block of others.
//!
//! The core is generic over the scalar type ([`scalar::Real`], implemented
//! for `f32` and `f64`); the aliases below fix it to `f64`, which is what
//! the command-line tool uses.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod em;
mod error;
pub mod eval;
pub mod impute;
pub mod panel;
pub mod pipeline;
pub mod ppca;
pub mod scalar;

pub use error::Error;

pub type Matrix = data::MaskedMatrix<f64>;
pub type Component = ppca::PpcaComponent<f64>;
pub type Mixture = em::MixtureModel<f64>;
pub type Imputed = impute::ImputedFile<f64>;
pub type Matched = impute::MatchedOutput<f64>;
