//! Identification of input-state separable models for control systems.
//!
//! The crate covers snapshot generation for discrete-time control systems,
//! dictionaries of observables in normal form, extended dynamic mode
//! decomposition on the augmented state-input space together with the
//! consistency index that certifies the worst-case prediction error of a
//! dictionary, extraction of separable, linear, bilinear and switched lifted
//! models, and gradient-based learning of dictionaries that minimize the
//! index.

#![allow(clippy::type_complexity, clippy::neg_cmp_op_on_partial_ord)]
pub mod dynamics;
pub mod edmd;
pub mod error;
pub mod eval;
pub mod learning;
pub mod linalg;
pub mod model;
pub mod observables;

pub use error::{KcfError, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/snapshots.md")]
    mod snapshots {}
    #[doc = include_str!("../../../book/src/dictionaries.md")]
    mod dictionaries {}
    #[doc = include_str!("../../../book/src/consistency.md")]
    mod consistency {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
