//! Kernel-penalized regression for high-dimensional structured predictors.
//!
//! Kernels over samples and taxa (phylogenetic, compositional, Euclidean), closed-form
//! penalized estimators, k-fold tuning, and the Monte-Carlo scenarios used to compare them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod compositional;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod linalg;
pub mod matio;
pub mod phylo;
pub mod simulation;
pub mod tuning;

pub use error::{KprError, Result};
pub use estimators::{FitResult, Method};
pub use kernels::{Kernel, Provenance, SquareMatrix};
pub use matio::{AbundanceTable, ResponseVector};
pub use phylo::PhyloTree;
pub use simulation::{Scenario, ScenarioConfig, SimulationRecord};
pub use tuning::{CvMethod, CvResult, TuningRule};
