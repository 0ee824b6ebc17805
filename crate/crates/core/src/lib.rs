//! Neural processes with Weibull stochastic attention.
//!
//! The crate bundles a small reverse-mode tape ([`tensor`]), the
//! reparameterised distributions and closed-form divergences the objectives
//! need ([`distributions`]), the CNP / NP / ANP / NPSA model family
//! ([`model`]), synthetic and CSV task sources ([`data`]), the training and
//! evaluation loop ([`training`]) and attention diagnostics ([`reporting`]).

pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod model;
pub mod reporting;
pub mod rng;
pub mod tensor;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
