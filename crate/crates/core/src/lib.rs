//! Adaptive finite elements on triangles where one additive Schwarz
//! subspace decomposition serves as the solver preconditioner and as the
//! a posteriori error estimator.
//!
//! Module map:
//!
//! * [`mesh`]: conforming triangulations, newest-vertex bisection, vertex patches.
//! * [`fem`]: Lagrange spaces, assembly, Galerkin solves, energy norms, residuals.
//! * [`schwarz`]: subspace decompositions, smoother / preconditioner, PCG,
//!   spectral bounds and the dual-decomposition identity oracle.
//! * [`estimate`]: residual data, explicit, bubble and enriched patch estimators,
//!   smoother estimate and data oscillation.
//! * [`adapt`]: Dörfler marking, the adaptive loop, reference errors and rates.
//! * [`cli`]: configuration-driven front end.

// `!(x > 0.0)` is used on purpose so NaN is rejected; the quadrature tables
// keep their published digits; dense kernels index several arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision, clippy::needless_range_loop)]

pub mod adapt;
pub mod cli;
pub mod error;
pub mod estimate;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod par;
pub mod quadrature;
pub mod schwarz;

pub use error::{Error, Result};
