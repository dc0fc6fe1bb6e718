//! Matching (M), difference-in-differences (DID) and difference-in-differences
//! matching (DIDM) estimands of the average treatment effect on the treated,
//! computed on two-period panel data.
//!
//! Under negative selection on the pre-treatment outcome, first-order
//! stochastic dominance of the control group's lagged outcome and a weakly
//! decreasing control trend function, the three estimands bracket each other:
//! `M <= DIDM <= DID`. This crate provides
//!
//! - [`dataset`]: the canonical unit-level data model, CSV ingestion,
//!   partial-linear residualization and common-support trimming;
//! - [`estimators`]: mean-difference, nearest-neighbor and local-linear
//!   matching estimators of the three estimands;
//! - [`diagnostics`]: empirical checks of the three bracketing conditions;
//! - [`inference`]: stratified bootstrap intervals for estimands and gaps;
//! - [`simulator`]: parametric and counterexample data-generating processes
//!   that carry both potential outcomes, with closed forms and exact
//!   identification errors;
//! - [`event_adapter`]: mapping of long staggered-adoption panels to the
//!   two-period frame for event-study cells.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise. Results are
//! bit-identical either way.

pub mod dataset;
pub mod diagnostics;
pub mod estimators;
pub mod event_adapter;
pub mod export;
pub mod inference;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod simulator;

pub use dataset::{CanonicalDataset, CsvSchema, DatasetError, DatasetMeta, Group, UnitRecord};
pub use estimators::{AttEstimate, BracketReport, Estimand, EstimationError, MethodKind, MethodSpec};
pub use simulator::{CounterexampleKind, OraclePanel, ParametricDgpSpec};
