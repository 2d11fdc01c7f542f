//! Monte Carlo solvers for backward stochastic variational inequalities.
//!
//! The crate is organised bottom-up: convex penalties and their resolvents,
//! problem definitions, counter-based Brownian increments, forward Euler
//! simulation (optionally reflected), conditional-expectation estimators,
//! the backward recursion itself, and an exact tree oracle used for checking.

pub mod backward;
pub mod cond_exp;
pub mod config;
pub mod convex;
pub mod error;
pub mod forward;
pub mod oracle;
pub mod problem;
pub mod registry;
pub mod rng;
pub mod study;

pub use backward::{
    run_backward, solve_auto, solve_bsvi, solve_fixed_point, solve_generalized, BackwardSolution, FixedPoint, LayerSink,
    PassSummary, Recursion,
};
pub use cond_exp::{ConditionalEstimator, EstimatorKind, RegressionBasis, TreeLayout};
pub use config::{load_config, parse_config, Config, Reference, StudyConfig};
pub use convex::{project_to_convex, ConvexFunction, ConvexKind, ConvexSet, Subdifferential};
pub use error::{Error, Result};
pub use forward::{euler_simulate, projected_euler_simulate, simulate_forward, ForwardEnsemble};
pub use oracle::{oracle_deviation, oracle_solve, TreeTable};
pub use problem::{
    make_partition, validate_spec, Partition, ProblemBuilder, ProblemSpec, SchemeParams, SchemeVariant,
    ValidationReport, Violation,
};
pub use registry::{analytic_solution, build_problem, list_problems, AnalyticSolution, ProblemConfig, ProblemInfo};
pub use rng::{enumerate_tree, sample_increments, IncrementEnsemble, IncrementLaw};
pub use study::{fit_rate, run_study, solve_single, ConvergenceReport, StudyRow};

/// Formats a float with 17 significant digits.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
