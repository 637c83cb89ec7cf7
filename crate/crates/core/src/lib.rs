//! Learning-based data-enabled economic predictive control.
//!
//! The crate turns raw input/output/cost trajectories into a convex
//! receding-horizon controller:
//!
//! * [`trajectory`] holds time series, datasets and normalizers;
//! * [`hankel`] builds block-Hankel matrices, checks persistent excitation
//!   and performs SVD order reduction;
//! * [`lti`] is an exact LTI simulator used as a fundamental-lemma oracle;
//! * [`mlp`] and [`cost`] are the lifting networks and quadratic cost surrogate,
//!   trained jointly by [`trainer`];
//! * [`qp`] is a dense interior-point QP solver plus the online problem assembly;
//! * [`controller`] runs the closed loop against the benchmark [`plants`];
//! * [`basis`] numerically verifies the orthonormal-basis results that motivate
//!   the lifting architecture;
//! * [`cli`] wires everything into the `deeepc` command.

pub mod basis;
pub mod cli;
pub mod controller;
pub mod cost;
pub mod hankel;
pub mod linalg;
pub mod lti;
pub mod mlp;
pub mod plants;
pub mod qp;
pub mod trainer;
pub mod trajectory;

pub use nalgebra::{DMatrix, DVector};
