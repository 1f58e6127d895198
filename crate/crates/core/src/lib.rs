//! Back-end laboratory for SLAM in deforming environments.
//!
//! The crate has three layers:
//!
//! - a deformation model layer: [`lie`] (rotation primitives) and [`ed_graph`]
//!   (embedded-deformation graphs, their energies, and the gauge maps that
//!   leave those energies unchanged);
//! - an analysis layer: [`observability`] (Jacobian/Fisher-information
//!   assembly, numerical rank and null-space reports);
//! - an estimation layer: [`ts_slam`] (time-series-prior solver plus rigid and
//!   ED visual-odometry baselines), [`simulator`] (seeded Monte Carlo worlds)
//!   and [`montecarlo`] (batch runner and CSV summaries).
//!
//! Heavy loops (Monte Carlo runs, per-feature Schur elimination) run on rayon
//! when the `parallel` feature is enabled; results are reduced in index order
//! so output is identical for any worker count.

pub mod ed_graph;
pub mod error;
pub mod fixtures;
pub mod lie;
pub mod montecarlo;
pub mod observability;
pub mod par;
pub mod simulator;
pub mod ts_slam;

pub use error::CoreError;
