//! Counting and characterizing critical points of lattice families of
//! holomorphic sections: radial lattice sums over star-shaped bodies,
//! covariant critical-point solving on Hermitian line bundles, census
//! scans over integer flux lattices, and the Gaussian/indicator density
//! integrals they converge to, with an Itzykson-Zuber route as an
//! independent cross-check and the attractor-moment special case.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod error;
pub mod blackhole;
pub mod config;
pub mod critsolve;
pub mod density;
pub mod expr;
pub mod fd;
pub mod geometry;
pub mod izhc;
pub mod lattice;
pub mod quad;
pub mod rng;
pub mod summation;

pub use error::{Error, Result};
