//! Loss-landscape analysis engine.
//!
//! Trains small seeded networks and computes the metrics used to compare
//! their loss landscapes:
//!
//! - local: top Hessian eigenvalues ([`local::top_eigenvalues`]) and 2D loss
//!   slices along filter-normalized random directions ([`local::loss_surface`]);
//! - topology of a slice: merge tree and 0-dimensional persistence
//!   ([`tda`]);
//! - pairwise: mode connectivity along a trained quadratic Bezier curve and
//!   linear CKA of hidden features ([`global`]);
//! - the global structure graph that ties them together ([`atlas`]).

pub mod atlas;
pub mod autodiff;
pub mod error;
pub mod global;
pub mod linalg;
pub mod local;
pub mod model;
pub mod rng;
pub mod tda;

pub use error::{Error, FieldError, Result};
