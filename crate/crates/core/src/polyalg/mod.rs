//! Sparse multivariate polynomials and polynomial maps.
//!
//! Everything else in the crate is expressed in terms of [`MultiPoly`]
//! and [`PolyMap`]: dynamics, basis functions, potential terms, and the
//! forward and inverse transition maps.

mod map;
mod monomial;
mod poly;

pub use map::PolyMap;
pub use monomial::Monomial;
pub use poly::{MultiPoly, DEFAULT_PRUNE_REL};
