//! Numerical construction of constant positive scalar curvature metrics on
//! connected sums of Delaunay manifolds.

pub mod conformal;
pub mod corrector;
pub mod error;
pub mod fowler;
pub mod gluing;
pub mod modeline;
pub mod ode;

pub use error::{Error, Result};

/// Crate name and version, embedded in every report.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
