//! Group average treatment effects by matching, with weighting, regression,
//! doubly robust and propensity-stratified competitors, subsampling
//! intervals and a simulation harness.
//!
//! ```no_run
//! use gatematch::{estimate, EstimatorConfig, EstimatorTag, EvaluationGrid};
//! # fn demo(d: &gatematch::Dataset) -> gatematch::Result<()> {
//! let grid = EvaluationGrid::standard();
//! let cfg = EstimatorConfig::for_estimator(EstimatorTag::Match);
//! let curve = estimate(d, &grid, &cfg)?;
//! println!("{:?}", curve.estimates);
//! # Ok(()) }
//! ```

pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod kernel;
pub mod matching;
pub mod nuisance;
pub mod seed;
pub mod simulation;

pub use data::{
    load_dataset, read_dataset, ColumnRoles, CurveInterval, Dataset, Diagnostics, EstimatorTag, EvaluationGrid,
    GateCurve, ZKind,
};
pub use error::{GateError, Result};
pub use estimators::{estimate, estimate_with, EstimatorConfig, NuisanceOverride, Session};
pub use inference::{subsample_ci, subsample_ci_with, SubsampleConfig, SubsampleResult};
pub use kernel::{BandwidthMethod, KernelKind};
pub use matching::{find_matches, impute_potential_outcomes, MatchConfig, Metric};
pub use nuisance::{DesignSpec, Term};
pub use simulation::{generate_case, run_monte_carlo, CaseSpec, MonteCarloConfig, SimulationReport};
