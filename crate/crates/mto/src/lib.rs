//! Multiresolution topology optimization with per-element `dp`-adaptivity.
//!
//! The solver works on a fixed structured grid of quadrilateral "MTO elements".
//! Each element bundles a finite element of polynomial order `p`, a set of `d`
//! design points placed by k-means clustering, and a patch of the global
//! uniform background density grid. Two linear projections connect the three
//! layers: an element-local map from design points to background cells, and a
//! global distance-weighted filter from cells to integration points. Between
//! optimization cycles, three indicators (an edge-jump analysis error, a
//! density-distribution indicator, and an element-local order-elevation energy
//! test) drive independent adaptation of `p` and `d` per element.
//!
//! Modules follow the pipeline:
//! - [`quadrature`], [`basis`]: Gauss rules and tensor-product Lagrange bases.
//! - [`mesh`]: the element grid and its adaptive state.
//! - [`design`]: design-point placement, projections, design transfer.
//! - [`analysis`]: mixed-order conforming assembly and the sparse solve.
//! - [`optimizer`]: adjoint sensitivities and the constrained design update.
//! - [`indicators`]: the three refinement indicators.
//! - [`adaptivity`]: the per-cycle adaptation algorithm.
//! - [`problem`], [`config`], [`driver`], [`export`]: benchmark definitions,
//!   run configuration, the multi-cycle driver, and file outputs.

pub mod adaptivity;
pub mod analysis;
pub mod basis;
pub mod config;
pub mod design;
pub mod driver;
pub mod error;
pub mod export;
pub mod indicators;
pub mod mesh;
pub mod optimizer;
pub mod problem;
pub mod quadrature;

pub use error::{Error, Result};
