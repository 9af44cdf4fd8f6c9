//! COSSO: component selection and smoothing for smoothing-spline ANOVA models.
//!
//! The estimator penalizes the sum of the RKHS norms of the functional ANOVA
//! components, which drives whole components to zero. Fitting alternates a
//! fixed-weight smoothing spline solve with a nonnegative-garrote step over
//! the component weights θ.
//!
//! Pluggable pieces are registered by name: component kernels
//! ([`kernel::kernel_registry`]), fit strategies
//! ([`solver::strategy_registry`]) and tuning criteria
//! ([`tuning::criterion_registry`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod garrote;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod logistic;
pub mod registry;
pub mod rng;
pub mod sim;
pub mod solver;
pub mod spectral;
pub mod spline;
pub mod tuning;

pub use data::{Dataset, Scaling};
pub use error::{CossoError, Result};
pub use garrote::{garrote_step, garrote_step_penalized, GarroteProblem, GarroteSolution};
pub use kernel::{
    kernel_from_spec, sobolev_rk, weighted_gram, AnovaDesign, Component, ComponentKernel, GramSet, ThetaWeights,
};
pub use solver::{
    cosso_objective, fit_full_iterate, fit_one_step, Budget, FitOptions, FitState, FitStrategy, SolverFit,
};
pub use spline::{solve_spline, SplineSolution};
