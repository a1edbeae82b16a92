//! Adaptive central-upwind finite-volume solver for the two-dimensional
//! variable-density shallow water equations on quadtree grids.
//!
//! The scheme evolves cell averages of (w, hu, hv, h*rho) with a second-order
//! piecewise-linear reconstruction, one-sided local speed estimates and a
//! hydrostatic source quadrature that keeps lake-at-rest states steady to
//! machine precision while preserving nonnegative depth and density. After
//! every step the grid is regenerated from gradient-based seeding points and
//! the solution is transferred conservatively.

pub mod bathymetry;
pub mod boundary;
pub mod error;
pub mod grid;
pub mod reconstruction;
pub mod state;

pub use error::{Result, SolverError};
pub use state::{Conserved, FaceState, PrimState, Primitive};
