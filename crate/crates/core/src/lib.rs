//! Time-fractional Cahn–Hilliard solver.
//!
//! The Caputo derivative is discretized by Grünwald–Letnikov convolution
//! quadrature and space by Q1 finite elements on structured grids.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod exec;
pub mod grid;
pub mod linalg;
pub mod observables;
pub mod physics;
pub mod quadrature;
pub mod sensitivity;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{FeSpace, ScalarField, StructuredGrid};
pub use linalg::CsrMatrix;
pub use physics::{MobilityLaw, PotentialLaw};
pub use quadrature::{caputo_residual, gl_weights, history_tail, GlWeights, HistoryBuffer};
pub use observables::{ObservableSet, TimeSeries};
pub use sensitivity::{qoi_tumor_mass, run_sobol, sample_matrices, sobol_indices, PriorSet, SobolResult, TumorTemplate};
pub use solver::{run, step_ch, step_ok, step_tumor, ModelSpec, ModelVariant, Simulation, SimulationOutput, StepResult};
