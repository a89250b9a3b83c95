//! Control randomisation for mean-field control with common noise, realised
//! exactly on finite scenario trees.
//!
//! The value of a McKean–Vlasov control problem is computed three ways:
//! brute-force dynamic programming over decomposed controls
//! ([`value::value_direct`]), the penalised and constrained backward equation
//! on the mark-extended tree ([`bsde`]), and Monte Carlo over intensity-tilted
//! Poisson randomisations ([`randomisation`], [`value::value_randomised_mc`]).

pub mod bsde;
pub mod controls;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod randomisation;
pub mod rng;
pub mod scenario;
pub mod value;

pub use error::{Error, Result};
