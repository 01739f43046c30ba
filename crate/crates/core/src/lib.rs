//! Equivariant interatomic potential built on Cartesian rank-2 tensor features.
//!
//! Per-atom state is a stack of channels, each a real 3x3 matrix that splits
//! into scalar, vector and symmetric-traceless parts. Message passing combines
//! neighbor tensors with symmetrized matrix products so that energies stay
//! invariant and vector/tensor outputs stay covariant under rigid motions
//! (with an optional rotation-only mode for ablations).
//!
//! The crate is self-contained: exact tensor algebra ([`algebra`]), neighbor
//! lists and radial features ([`geometry`]), a replayable reverse-mode tape
//! ([`tape`]), the model itself ([`model`]), training ([`train`]), symmetry
//! and gradient checkers ([`verify`]), and file formats plus a CLI ([`io`],
//! [`cli`]).

pub mod algebra;
pub mod cli;
pub mod fixtures;
pub mod geometry;
pub mod io;
pub mod mat3;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod train;
pub mod verify;

/// Scalar type used throughout. Double precision by default; enabling the
/// `f32` cargo feature builds the whole crate in single precision instead.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Tolerance scale factor: 1 in double precision, loosened under `f32`.
#[cfg(not(feature = "f32"))]
pub const EPS_SCALE: Real = 1.0;
#[cfg(feature = "f32")]
pub const EPS_SCALE: Real = 1.0e4;
