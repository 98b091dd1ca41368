//! Energy-optimal control of polynomial dynamical systems through a
//! truncated Koopman operator.
//!
//! The pipeline is: polynomial dynamics ([`models`]) are augmented with
//! Pontryagin costates ([`ocp`]), the augmented flow is approximated by a
//! Galerkin projection onto normalized Legendre polynomials ([`basis`],
//! [`koopman`]), the resulting polynomial transition map is inverted
//! ([`mapinv`]) and evaluated at the boundary conditions to recover the
//! optimal initial costates. [`verify`] holds the independent truth
//! sources and [`scenario`] drives complete experiments.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod error;
pub mod koopman;
pub mod mapinv;
pub mod models;
pub mod ocp;
pub mod par;
pub mod polyalg;
pub mod scenario;
pub mod verify;

pub use error::{Error, Result, Stage};
pub use polyalg::{Monomial, MultiPoly, PolyMap};
