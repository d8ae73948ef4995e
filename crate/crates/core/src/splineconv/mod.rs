//! B-spline kernel graph convolution on pseudo-coordinates.
//!
//! An image convolution slides a fixed `3×3` stencil over a pixel grid. On a
//! geometric graph the neighbors sit at arbitrary offsets, so the kernel is a
//! continuous function of the offset instead: a tensor-product B-spline whose
//! control points carry the trainable `Cin×Cout` weight slabs.

mod basis;
mod conv;
pub mod oracle;
mod pseudo;

pub use basis::{basis_1d, basis_2d, knots, spline_basis, Basis1d, Basis2d};
pub use conv::{spline_conv, SplineKernel};
pub use oracle::naive_conv_oracle;
pub use pseudo::{pseudo_coords, PseudoCoords, RHO_EPS};

pub const DEFAULT_KERNEL_SIZE: usize = 3;
pub const DEFAULT_DEGREE: usize = 1;
