//! Distributed approximate-Newton (DANA) solver for linearly constrained,
//! separable quadratic resource allocation, together with the Laplacian
//! weight-design pipeline it depends on.
//!
//! Module map:
//!
//! - [`linalg`]: symmetric matrices, Jacobi eigendecomposition, the
//!   orthogonal reduction transform and truncated Taylor inverses.
//! - [`graph`]: random connected topologies, incidence matrices, Laplacians.
//! - [`dispatch`]: the economic-dispatch problem and its KKT oracle.
//! - [`solver`]: DANA (dense and per-agent message passing) and the DGD
//!   baseline, with per-iteration traces.
//! - [`sdp`]: a small dense primal-dual interior-point SDP solver.
//! - [`design`]: convex weight design, post-scaling and the best-case bound.
//! - [`harness`]: experiment configuration, trial batches and file output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod dispatch;
pub mod error;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod sdp;
pub mod solver;

pub use error::{Error, Result};
